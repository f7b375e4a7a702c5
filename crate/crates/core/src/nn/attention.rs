//! Multi-head self-attention over the spatial positions of a feature map.
//!
//! Q, K and V come from 1×1 convolutions with `heads × dim_per_head`
//! output channels. Each head attends over all `H·W` positions with
//! scores scaled by `1/√dim_per_head`; the concatenated heads are fused
//! back to the input width by another 1×1 convolution and added to the
//! input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::layers::{conv, init_conv};
use super::params::ParamStore;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub in_channels: usize,
    pub heads: usize,
    pub dim_per_head: usize,
}

impl AttentionConfig {
    pub fn projection_channels(&self) -> usize {
        self.heads * self.dim_per_head
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.heads == 0 || self.dim_per_head == 0 {
            return Err(Error::invalid("attention dimensions must be positive"));
        }
        Ok(())
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut impl Rng) {
        let proj = self.projection_channels();
        // a key bias shifts every score in a row equally, which softmax
        // ignores, so keys carry none
        for (name, bias) in [("q", true), ("k", false), ("v", true)] {
            init_conv(store, &format!("{prefix}.{name}"), self.in_channels, proj, 1, bias, rng);
        }
        init_conv(store, &format!("{prefix}.out"), proj, self.in_channels, 1, true, rng);
    }
}

pub struct AttentionOutput {
    pub out: Var,
    /// `[B·heads, L, L]` softmax maps; rows index queries, columns keys.
    pub maps: Var,
}

pub fn attention_forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &AttentionConfig,
    prefix: &str,
    x: Var,
) -> Result<AttentionOutput> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(Error::shape(
            format!("attention `{prefix}`"),
            format!("expected [B,{},H,W], got {shape:?}", cfg.in_channels),
        ));
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let l = h * w;
    let (heads, d) = (cfg.heads, cfg.dim_per_head);
    let q = conv(g, p, &format!("{prefix}.q"), x, 1, 0, true)?;
    let k = conv(g, p, &format!("{prefix}.k"), x, 1, 0, false)?;
    let v = conv(g, p, &format!("{prefix}.v"), x, 1, 0, true)?;
    // channels are grouped head-major, so [B, heads·d, H, W] views as [B·heads, d, L]
    let q = g.reshape(q, &[b * heads, d, l])?;
    let k = g.reshape(k, &[b * heads, d, l])?;
    let v = g.reshape(v, &[b * heads, d, l])?;
    let scores = g.bmm(q, k, true, false)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let maps = g.softmax_last(scores)?;
    let heads_out = g.bmm(v, maps, false, true)?;
    let merged = g.reshape(heads_out, &[b, heads * d, h, w])?;
    let fused = conv(g, p, &format!("{prefix}.out"), merged, 1, 0, true)?;
    let out = g.add(fused, x)?;
    Ok(AttentionOutput { out, maps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_inputs, check_params, GradCheckOptions};
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CFG: AttentionConfig = AttentionConfig {
        in_channels: 3,
        heads: 2,
        dim_per_head: 2,
    };

    fn setup(seed: u64) -> (ParamStore<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        CFG.init_params(&mut store, "att", &mut rng);
        for (_, t) in store.params_mut() {
            // nonzero biases so their gradients are exercised
            t.data_mut().iter_mut().for_each(|v| *v += 0.1);
        }
        (store, Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng))
    }

    fn run(store: &ParamStore<f64>, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = attention_forward(&mut g, store, &CFG, "att", xv).unwrap();
        (g.value(out.out).clone(), g.value(out.maps).clone())
    }

    #[test]
    fn output_shape_equals_input() {
        let (store, x) = setup(1);
        let (y, maps) = run(&store, &x);
        assert_eq!(y.shape(), x.shape());
        assert_eq!(maps.shape(), [4, 16, 16]);
    }

    #[test]
    fn zero_branch_is_identity() {
        let (mut store, x) = setup(2);
        for (_, t) in store.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(run(&store, &x).0.data(), x.data());
    }

    #[test]
    fn maps_are_row_stochastic() {
        let (store, x) = setup(3);
        let (_, maps) = run(&store, &x);
        for row in maps.data().chunks(16) {
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn equivariant_to_spatial_permutation() {
        use rand::seq::SliceRandom;
        let (store, x) = setup(4);
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
        let permute = |t: &Tensor<f64>| {
            let mut out = t.clone();
            for plane in 0..t.numel() / 16 {
                for (dst, &src) in perm.iter().enumerate() {
                    out.data_mut()[plane * 16 + dst] = t.data()[plane * 16 + src];
                }
            }
            out
        };
        let a = permute(&run(&store, &x).0);
        let b = run(&store, &permute(&x)).0;
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let (store, _) = setup(6);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(matches!(
            attention_forward(&mut g, &store, &CFG, "att", x),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, x) = setup(7);
        let probe = Tensor::randn(x.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let loss = |g: &mut Graph<f64>, p: &ParamStore<f64>, xv: Var| -> Result<Var> {
            let y = attention_forward(g, p, &CFG, "att", xv)?.out;
            let c = g.constant(probe.clone());
            let y = g.mul(y, c)?;
            Ok(g.sum(y))
        };
        let r = check_inputs(&[x.clone()], GradCheckOptions::default(), |g, v| loss(g, &store, v[0])).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
        let r = check_params(&store, |_| true, GradCheckOptions::default(), |g, p| {
            let xv = g.constant(x.clone());
            loss(g, p, xv)
        })
        .unwrap();
        assert!(r.passed(), "{:?}", r.failures);
    }
}
