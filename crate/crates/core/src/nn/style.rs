//! Style-modulated decoder block.
//!
//! The style vector is mapped to per-input-channel scales, the 3×3 kernel
//! is modulated by them and (optionally) demodulated to unit L2 norm per
//! output channel. The encoder skip map arrives in place of random noise
//! and is injected through a learned 1×1 projection.
//!
//! Modulation is applied to activations rather than to a per-sample copy
//! of the kernel: `conv(x·s, w)·d` equals `conv(x, w·s·d)` exactly, which
//! keeps one shared weight tensor for the whole batch.
//!
//! All weights here use the equalized learning rate of
//! [`super::layers::he_gain`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::layers::{init_conv_eq, init_dense_eq, scaled_weight};
use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const DEMOD_EPS: f64 = 1e-8;
pub const STYLE_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub style_dim: usize,
    pub upsample: bool,
    pub noise_channels: usize,
    pub demodulate: bool,
}

impl StyleBlockConfig {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        if self.upsample {
            (2 * h, 2 * w)
        } else {
            (h, w)
        }
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut impl Rng) {
        init_dense_eq(store, &format!("{prefix}.affine"), self.style_dim, self.in_channels, true, rng);
        // unit scales at initialization
        store.insert_param(format!("{prefix}.affine.bias"), Tensor::ones(&[self.in_channels]));
        init_conv_eq(store, &format!("{prefix}.conv"), self.in_channels, self.out_channels, 3, false, rng);
        store.insert_param(format!("{prefix}.bias"), Tensor::zeros(&[self.out_channels]));
        init_conv_eq(store, &format!("{prefix}.noise"), self.noise_channels, self.out_channels, 1, false, rng);
    }
}

/// Per-sample channel scales `A(w)`, shape `[B, in_channels]`.
pub fn style_scales<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    style: Var,
) -> Result<Var> {
    let w = scaled_weight(g, p, &format!("{prefix}.affine.weight"))?;
    let b = g.param(p, &format!("{prefix}.affine.bias"))?;
    g.linear(style, w, Some(b))
}

/// The modulated (and optionally demodulated) convolution alone, given
/// precomputed style scales.
pub fn modulated_conv<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &StyleBlockConfig,
    prefix: &str,
    x: Var,
    scales: Var,
) -> Result<Var> {
    let weight = scaled_weight(g, p, &format!("{prefix}.conv.weight"))?;
    let x = if cfg.upsample { g.upsample2x(x)? } else { x };
    let xs = g.mul_channel(x, scales)?;
    let y = g.conv2d(xs, weight, 1, 1)?;
    if !cfg.demodulate {
        return Ok(y);
    }
    // d[b,o] = (Σ_i s[b,i]²·Σ_k w[o,i,k]² + ε)^(-1/2)
    let (o, i) = (cfg.out_channels, cfg.in_channels);
    let w2 = g.mul(weight, weight)?;
    let w2 = g.reshape(w2, &[o * i, 9])?;
    let w2 = g.sum_last(w2)?;
    let w2 = g.reshape(w2, &[o, i])?;
    let s2 = g.mul(scales, scales)?;
    let energy = g.linear(s2, w2, None)?;
    let energy = g.add_scalar(energy, DEMOD_EPS);
    let demod = g.powf(energy, -0.5);
    g.mul_channel(y, demod)
}

pub fn style_block_forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &StyleBlockConfig,
    prefix: &str,
    features: Var,
    style: Var,
    skip_noise: Var,
) -> Result<Var> {
    let ctx = || format!("style block `{prefix}`");
    let fs = g.shape(features).to_vec();
    if fs.len() != 4 || fs[1] != cfg.in_channels {
        return Err(Error::shape(ctx(), format!("features {fs:?}, expected {} channels", cfg.in_channels)));
    }
    if g.shape(style) != [fs[0], cfg.style_dim] {
        return Err(Error::shape(ctx(), format!("style {:?}, expected [{}, {}]", g.shape(style), fs[0], cfg.style_dim)));
    }
    let (oh, ow) = cfg.output_hw(fs[2], fs[3]);
    let ns = g.shape(skip_noise).to_vec();
    if ns != [fs[0], cfg.noise_channels, oh, ow] {
        return Err(Error::shape(
            ctx(),
            format!("skip input {ns:?} does not match output [{}, {}, {oh}, {ow}]", fs[0], cfg.noise_channels),
        ));
    }
    let scales = style_scales(g, p, prefix, style)?;
    let y = modulated_conv(g, p, cfg, prefix, features, scales)?;
    let nw = scaled_weight(g, p, &format!("{prefix}.noise.weight"))?;
    let injected = g.conv2d(skip_noise, nw, 1, 0)?;
    let y = g.add(y, injected)?;
    let bias = g.param(p, &format!("{prefix}.bias"))?;
    let y = g.add_channel(y, bias)?;
    Ok(g.leaky_relu(y, STYLE_SLOPE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_inputs, check_params, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(upsample: bool, demodulate: bool) -> StyleBlockConfig {
        StyleBlockConfig {
            in_channels: 3,
            out_channels: 2,
            style_dim: 4,
            upsample,
            noise_channels: 2,
            demodulate,
        }
    }

    struct Case {
        store: ParamStore<f64>,
        x: Tensor<f64>,
        w: Tensor<f64>,
        skip: Tensor<f64>,
    }

    fn case(c: &StyleBlockConfig, seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        c.init_params(&mut store, "blk", &mut rng);
        let (oh, ow) = c.output_hw(4, 4);
        Case {
            store,
            x: Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng),
            w: Tensor::randn(&[2, 4], 1.0, &mut rng),
            skip: Tensor::randn(&[2, 2, oh, ow], 1.0, &mut rng),
        }
    }

    fn forward(c: &StyleBlockConfig, k: &Case) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let x = g.constant(k.x.clone());
        let w = g.constant(k.w.clone());
        let n = g.constant(k.skip.clone());
        let y = style_block_forward(&mut g, &k.store, c, "blk", x, w, n)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn output_geometry() {
        for up in [false, true] {
            let c = cfg(up, true);
            let y = forward(&c, &case(&c, 1)).unwrap();
            let (oh, ow) = c.output_hw(4, 4);
            assert_eq!(y.shape(), [2, 2, oh, ow]);
        }
    }

    #[test]
    fn unit_style_without_demodulation_is_plain_conv() {
        let c = cfg(false, false);
        let mut k = case(&c, 2);
        k.store.param_mut("blk.affine.weight").unwrap().data_mut().fill(0.0);
        let got = forward(&c, &k).unwrap();
        let mut g = Graph::new();
        let x = g.constant(k.x.clone());
        let w = g.param(&k.store, "blk.conv.weight").unwrap();
        let w = g.scale(w, 1.0 / 27f64.sqrt());
        let y = g.conv2d(x, w, 1, 1).unwrap();
        let n = g.constant(k.skip.clone());
        let nw = g.param(&k.store, "blk.noise.weight").unwrap();
        let nw = g.scale(nw, 1.0 / 2f64.sqrt());
        let inj = g.conv2d(n, nw, 1, 0).unwrap();
        let y = g.add(y, inj).unwrap();
        let y = g.leaky_relu(y, STYLE_SLOPE);
        for (a, b) in got.data().iter().zip(g.value(y).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_projection_ignores_skip_input() {
        let c = cfg(true, true);
        let mut k = case(&c, 3);
        k.store.param_mut("blk.noise.weight").unwrap().data_mut().fill(0.0);
        let a = forward(&c, &k).unwrap();
        k.skip = k.skip.map(|v| 10.0 * v + 3.0);
        assert_eq!(a.data(), forward(&c, &k).unwrap().data());
    }

    #[test]
    fn demodulation_cancels_uniform_style_scaling() {
        let c = cfg(false, true);
        let k = case(&c, 4);
        let conv_out = |scale: f64| {
            let mut g = Graph::new();
            let x = g.constant(k.x.clone());
            let w = g.constant(k.w.clone());
            let s = style_scales(&mut g, &k.store, "blk", w).unwrap();
            let s = g.scale(s, scale);
            let y = modulated_conv(&mut g, &k.store, &c, "blk", x, s).unwrap();
            g.value(y).clone()
        };
        let base = conv_out(1.0);
        for scale in [0.5, 3.0, 250.0] {
            for (a, b) in base.data().iter().zip(conv_out(scale).data()) {
                assert!((a - b).abs() < 1e-6, "{scale}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn mismatched_skip_is_shape_error() {
        let c = cfg(true, true);
        let mut k = case(&c, 5);
        k.skip = Tensor::zeros(&[2, 2, 4, 4]);
        assert!(matches!(forward(&c, &k), Err(Error::Shape { .. })));
        let mut k = case(&c, 5);
        k.w = Tensor::zeros(&[2, 3]);
        assert!(matches!(forward(&c, &k), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (up, demod) in [(false, true), (true, true), (true, false)] {
            let c = cfg(up, demod);
            let k = case(&c, 6);
            let probe = {
                let (oh, ow) = c.output_hw(4, 4);
                Tensor::randn(&[2, 2, oh, ow], 1.0, &mut ChaCha8Rng::seed_from_u64(7))
            };
            let loss = |g: &mut Graph<f64>, p: &ParamStore<f64>, v: &[Var]| -> Result<Var> {
                let y = style_block_forward(g, p, &c, "blk", v[0], v[1], v[2])?;
                let pc = g.constant(probe.clone());
                let y = g.mul(y, pc)?;
                Ok(g.sum(y))
            };
            let inputs = [k.x.clone(), k.w.clone(), k.skip.clone()];
            let r = check_inputs(&inputs, GradCheckOptions::default(), |g, v| loss(g, &k.store, v)).unwrap();
            assert!(r.passed(), "{:?}", r.failures);
            let r = check_params(&k.store, |_| true, GradCheckOptions::default(), |g, p| {
                let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                loss(g, p, &v)
            })
            .unwrap();
            assert!(r.passed(), "{:?}", r.failures);
        }
    }
}
