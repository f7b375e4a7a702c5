//! Residual bottleneck unit of the iris classifier.
//!
//! shortcut: max-pool(k=1, stride) → 1×1 conv → BN
//! residual: BN → 3×3 conv → BN → ReLU → 3×3 conv (stride) → BN
//! output:   shortcut + residual

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::layers::{batch_norm, conv, init_bn, init_conv, RunState};
use super::params::ParamStore;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl BottleneckConfig {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::invalid(format!("bottleneck stride must be 1 or 2, got {}", self.stride)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("bottleneck channels must be positive"));
        }
        Ok(())
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut impl Rng) {
        let (i, o) = (self.in_channels, self.out_channels);
        init_conv(store, &format!("{prefix}.shortcut.conv"), i, o, 1, false, rng);
        init_bn(store, &format!("{prefix}.shortcut.bn"), o);
        init_bn(store, &format!("{prefix}.res.bn1"), i);
        init_conv(store, &format!("{prefix}.res.conv1"), i, o, 3, false, rng);
        init_bn(store, &format!("{prefix}.res.bn2"), o);
        init_conv(store, &format!("{prefix}.res.conv2"), o, o, 3, false, rng);
        init_bn(store, &format!("{prefix}.res.bn3"), o);
    }
}

pub fn bottleneck_forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    st: &mut RunState<T>,
    cfg: &BottleneckConfig,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(Error::shape(
            format!("bottleneck `{prefix}`"),
            format!("expected [B,{},H,W], got {shape:?}", cfg.in_channels),
        ));
    }
    let s = g.max_pool2d(x, 1, cfg.stride)?;
    let s = conv(g, p, &format!("{prefix}.shortcut.conv"), s, 1, 0, false)?;
    let s = batch_norm(g, p, st, &format!("{prefix}.shortcut.bn"), s)?;

    let r = batch_norm(g, p, st, &format!("{prefix}.res.bn1"), x)?;
    let r = conv(g, p, &format!("{prefix}.res.conv1"), r, 1, 1, false)?;
    let r = batch_norm(g, p, st, &format!("{prefix}.res.bn2"), r)?;
    let r = g.relu(r);
    let r = conv(g, p, &format!("{prefix}.res.conv2"), r, cfg.stride, 1, false)?;
    let r = batch_norm(g, p, st, &format!("{prefix}.res.bn3"), r)?;
    g.add(s, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_inputs, check_params, GradCheckOptions};
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn init(cfg: &BottleneckConfig, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, "b", &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    fn forward(store: &ParamStore<f64>, cfg: &BottleneckConfig, x: &Tensor<f64>, train: bool) -> Tensor<f64> {
        let mut st = if train {
            RunState::train(ChaCha8Rng::seed_from_u64(0))
        } else {
            RunState::infer()
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = bottleneck_forward(&mut g, store, &mut st, cfg, "b", xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let cfg = BottleneckConfig { in_channels: 64, out_channels: 128, stride: 2 };
        let store = init(&cfg, 1);
        let x = Tensor::randn(&[1, 64, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(forward(&store, &cfg, &x, false).shape(), [1, 128, 16, 16]);
        assert_eq!(cfg.output_hw(7, 5), (4, 3));
        let odd = Tensor::randn(&[1, 64, 7, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(forward(&store, &cfg, &odd, false).shape(), [1, 128, 4, 3]);
    }

    #[test]
    fn zero_residual_leaves_shortcut() {
        let cfg = BottleneckConfig { in_channels: 2, out_channels: 3, stride: 2 };
        let mut store = init(&cfg, 4);
        for name in ["b.res.conv1.weight", "b.res.conv2.weight", "b.res.bn3.bias"] {
            store.param_mut(name).unwrap().data_mut().fill(0.0);
        }
        let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let y = forward(&store, &cfg, &x, false);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = g.max_pool2d(xv, 1, 2).unwrap();
        let s = conv(&mut g, &store, "b.shortcut.conv", s, 1, 0, false).unwrap();
        let s = batch_norm(&mut g, &store, &mut RunState::infer(), "b.shortcut.bn", s).unwrap();
        assert_eq!(y.data(), g.value(s).data());
    }

    #[test]
    fn inference_is_deterministic() {
        let cfg = BottleneckConfig { in_channels: 2, out_channels: 2, stride: 1 };
        let store = init(&cfg, 6);
        let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(forward(&store, &cfg, &x, false).data(), forward(&store, &cfg, &x, false).data());
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let cfg = BottleneckConfig { in_channels: 3, out_channels: 2, stride: 1 };
        let store = init(&cfg, 8);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let r = bottleneck_forward(&mut g, &store, &mut RunState::infer(), &cfg, "b", x);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (train, stride) in [(false, 1), (false, 2), (true, 2)] {
            let cfg = BottleneckConfig { in_channels: 2, out_channels: 2, stride };
            let mut store = init(&cfg, 9);
            for (_, t) in store.params_mut() {
                t.data_mut().iter_mut().for_each(|v| *v += 0.2);
            }
            let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(10));
            let loss = |g: &mut Graph<f64>, p: &ParamStore<f64>, xv: Var| -> Result<Var> {
                let mut st = if train {
                    RunState::train(ChaCha8Rng::seed_from_u64(0))
                } else {
                    RunState::infer()
                };
                let y = bottleneck_forward(g, p, &mut st, &cfg, "b", xv)?;
                // sum(output) plus a quadratic term so train-mode batch
                // norm (whose plain sum is constant) still has signal
                let y2 = g.mul(y, y)?;
                let a = g.sum(y);
                let b = g.sum(y2);
                g.add(a, b)
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

    #[test]
    fn sum_gradient_on_small_input() {
        let cfg = BottleneckConfig { in_channels: 2, out_channels: 2, stride: 1 };
        let store = init(&cfg, 11);
        let x = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(12));
        let r = check_inputs(&[x], GradCheckOptions::default(), |g, v| {
            let y = bottleneck_forward(g, &store, &mut RunState::infer(), &cfg, "b", v[0])?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.passed(), "{:?}", r.failures);
    }
}
