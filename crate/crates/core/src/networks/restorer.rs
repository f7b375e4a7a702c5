//! U-shaped restorer: encoder → mapping network → style-block decoder that
//! consumes the encoder skips in place of noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{encoder_forward, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::layers::{conv_eq, dense_eq, init_conv_eq, init_dense_eq};
use crate::nn::style::{style_block_forward, StyleBlockConfig, STYLE_SLOPE};
use crate::nn::{Graph, ParamStore, Real, Tensor, Var};

pub const MAPPING_PREFIX: &str = "map";
pub const DECODER_PREFIX: &str = "dec";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestorerConfig {
    pub encoder: EncoderConfig,
    pub mapping_depth: usize,
    pub demodulate: bool,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            mapping_depth: 4,
            demodulate: true,
        }
    }
}

impl RestorerConfig {
    pub fn style_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    /// One style block per encoder layer.
    pub fn num_blocks(&self) -> usize {
        self.encoder.depth()
    }

    pub fn block(&self, i: usize) -> StyleBlockConfig {
        let ch = &self.encoder.channels;
        let n = ch.len();
        StyleBlockConfig {
            in_channels: if i == 0 { ch[n - 1] } else { ch[n - i] },
            out_channels: ch[n - 1 - i],
            style_dim: self.style_dim(),
            upsample: i > 0,
            noise_channels: ch[n - 1 - i],
            demodulate: self.demodulate,
        }
    }

    /// `(block output [C,H,W], consumed skip [C,H,W])` for every block.
    pub fn wiring(&self) -> Vec<([usize; 3], [usize; 3])> {
        let mut skips: Vec<[usize; 3]> = self
            .encoder
            .layer_shapes()
            .into_iter()
            .map(|(c, s)| [c, s, s])
            .collect();
        skips.reverse();
        let mut side = 4;
        (0..self.num_blocks())
            .map(|i| {
                let b = self.block(i);
                if b.upsample {
                    side *= 2;
                }
                ([b.noise_channels, side, side], skips[i])
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        for (i, (out, skip)) in self.wiring().into_iter().enumerate() {
            if out != skip {
                return Err(Error::shape(
                    format!("style block {i}"),
                    format!("output {out:?} but skip {skip:?}"),
                ));
            }
        }
        Ok(())
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.encoder.init_params(store, rng);
        self.init_generator(store, rng);
    }

    /// Mapping network and decoder only — the GAN prior.
    pub fn init_generator<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let d = self.style_dim();
        for i in 0..self.mapping_depth {
            init_dense_eq(store, &format!("{MAPPING_PREFIX}.fc{i}"), d, d, true, rng);
        }
        let c = self.encoder.deepest_channels();
        store.insert_param(format!("{DECODER_PREFIX}.const"), Tensor::randn(&[1, c, 4, 4], 1.0, rng));
        for i in 0..self.num_blocks() {
            self.block(i).init_params(store, &format!("{DECODER_PREFIX}.block{i}"), rng);
        }
        init_conv_eq(store, &format!("{DECODER_PREFIX}.to_rgb"), self.encoder.channels[0], 3, 1, true, rng);
    }
}

pub fn mapping_forward<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, cfg: &RestorerConfig, z: Var) -> Result<Var> {
    if g.shape(z).len() != 2 || g.shape(z)[1] != cfg.style_dim() {
        return Err(Error::shape("mapping", format!("z {:?}, expected [B,{}]", g.shape(z), cfg.style_dim())));
    }
    let mut w = z;
    for i in 0..cfg.mapping_depth {
        w = dense_eq(g, p, &format!("{MAPPING_PREFIX}.fc{i}"), w, true)?;
        w = g.leaky_relu(w, STYLE_SLOPE);
    }
    Ok(w)
}

/// Runs the decoder. `styles` holds either one `[B, style_dim]` code shared
/// by every block or one per block; `skips` (deepest first) of `None`
/// feeds zeros.
pub fn decoder_forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &RestorerConfig,
    styles: &[Var],
    skips: Option<&[Var]>,
) -> Result<Var> {
    let n = cfg.num_blocks();
    if styles.len() != 1 && styles.len() != n {
        return Err(Error::invalid(format!("expected 1 or {n} style codes, got {}", styles.len())));
    }
    if let Some(s) = skips {
        if s.len() != n {
            return Err(Error::shape("decoder", format!("{} skips for {n} blocks", s.len())));
        }
    }
    let batch = g.shape(styles[0])[0];
    let c = g.param(p, &format!("{DECODER_PREFIX}.const"))?;
    let mut x = g.repeat_batch(c, batch)?;
    for (i, (out, _)) in cfg.wiring().into_iter().enumerate() {
        let noise = match skips {
            Some(s) => s[i],
            None => g.constant(Tensor::zeros(&[batch, out[0], out[1], out[2]])),
        };
        let style = styles[if styles.len() == 1 { 0 } else { i }];
        x = style_block_forward(g, p, &cfg.block(i), &format!("{DECODER_PREFIX}.block{i}"), x, style, noise)?;
    }
    let rgb = conv_eq(g, p, &format!("{DECODER_PREFIX}.to_rgb"), x, 1, 0, true)?;
    Ok(g.sigmoid(rgb))
}

/// Full restoration pass; output has the input's shape and lies in (0, 1).
pub fn restore<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, cfg: &RestorerConfig, lq: Var) -> Result<Var> {
    let enc = encoder_forward(g, p, &cfg.encoder, lq)?;
    let w = mapping_forward(g, p, cfg, enc.z)?;
    decoder_forward(g, p, cfg, &[w], Some(&enc.skips))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_inputs, check_params, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> RestorerConfig {
        RestorerConfig {
            encoder: EncoderConfig {
                input_size: 16,
                channels: vec![2, 3, 3],
                latent_dim: 4,
                attention_insert_index: None,
                attention_heads: 1,
                attention_dim_per_head: Some(2),
            },
            mapping_depth: 2,
            demodulate: true,
        }
    }

    #[test]
    fn skip_wiring_holds_for_supported_sizes() {
        for size in [32, 64, 128, 256] {
            let cfg = RestorerConfig {
                encoder: EncoderConfig::toy(size).unwrap(),
                ..Default::default()
            };
            cfg.validate().unwrap();
            assert_eq!(cfg.num_blocks(), cfg.encoder.depth());
            for (out, skip) in cfg.wiring() {
                assert_eq!(out, skip);
            }
        }
        RestorerConfig::default().validate().unwrap();
    }

    #[test]
    fn restore_preserves_shape_and_is_deterministic() {
        let cfg = RestorerConfig {
            encoder: EncoderConfig::toy(32).unwrap(),
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        cfg.init_params(&mut store, &mut rng);
        let x = Tensor::randn(&[2, 3, 32, 32], 0.3, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = restore(&mut g, &store, &cfg, xv).unwrap();
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), x.shape());
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a.data(), run().data());
    }

    #[test]
    fn mapping_depth_zero_is_identity_and_zero_maps_to_zero() {
        let mut cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        cfg.init_params(&mut store, &mut rng);
        let z = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let zv = g.constant(Tensor::zeros(&[2, 4]));
        let w = mapping_forward(&mut g, &store, &cfg, zv).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v == 0.0));
        cfg.mapping_depth = 0;
        let zv = g.constant(z.clone());
        let w = mapping_forward(&mut g, &store, &cfg, zv).unwrap();
        assert_eq!(g.value(w).data(), z.data());
    }

    #[test]
    fn mapping_gradient_of_squared_norm() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        cfg.init_params(&mut store, &mut rng);
        let z = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let r = check_inputs(&[z], GradCheckOptions::default(), |g, v| {
            let w = mapping_forward(g, &store, &cfg, v[0])?;
            let w2 = g.mul(w, w)?;
            Ok(g.sum(w2))
        })
        .unwrap();
        assert!(r.passed(), "{:?}", r.failures);
    }

    #[test]
    fn restorer_gradients_at_sixteen_pixels() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        cfg.init_params(&mut store, &mut rng);
        let x = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rng);
        let y = Tensor::randn(&[1, 3, 16, 16], 0.5, &mut rng);
        let loss = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Result<Var> {
            let xv = g.constant(x.clone());
            let out = restore(g, p, &cfg, xv)?;
            let yv = g.constant(y.clone());
            let d = g.sub(out, yv)?;
            let h = g.huber(d);
            Ok(g.mean(h))
        };
        let opts = GradCheckOptions { max_entries: 6, ..Default::default() };
        let r = check_params(&store, |n| n.starts_with("dec.block"), opts, loss).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
        let r = check_params(&store, |n| !n.starts_with("dec.block"), opts, loss).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let cfg = RestorerConfig {
            encoder: EncoderConfig::toy(32).unwrap(),
            ..Default::default()
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        cfg.init_params(&mut store, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[2, 3, 32, 32], 0.5, &mut rng));
        let y = g.constant(Tensor::randn(&[2, 3, 32, 32], 0.5, &mut rng));
        let out = restore(&mut g, &store, &cfg, x).unwrap();
        let d = g.sub(out, y).unwrap();
        let h = g.huber(d);
        let loss = g.mean(h);
        let grads = g.param_grads(&g.backward(loss).unwrap());
        assert_eq!(grads.len(), store.len());
        for (name, t) in &grads {
            assert!(t.data().iter().any(|&v| v != 0.0), "{name} has no gradient");
        }
    }

    #[test]
    fn per_block_styles_are_accepted() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        cfg.init_generator(&mut store, &mut rng);
        let mut g = Graph::new();
        let ws: Vec<Var> = (0..3).map(|_| g.constant(Tensor::randn(&[2, 4], 1.0, &mut rng))).collect();
        let img = decoder_forward(&mut g, &store, &cfg, &ws, None).unwrap();
        assert_eq!(g.shape(img), [2, 3, 16, 16]);
        assert!(decoder_forward(&mut g, &store, &cfg, &ws[..2], None).is_err());
    }
}
