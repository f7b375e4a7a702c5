//! Adam with bias correction and per-prefix learning rates.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    /// `(name prefix, learning rate)`; the longest matching prefix wins.
    pub groups: Vec<(String, f64)>,
    pub step: u64,
    pub first: IndexMap<String, Tensor<f32>>,
    pub second: IndexMap<String, Tensor<f32>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, groups: Vec<(String, f64)>) -> Self {
        Self {
            config,
            groups,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn lr_for(&self, name: &str) -> Option<f64> {
        self.groups
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map(|&(_, lr)| lr)
    }

    /// One Adam update of every parameter named in `grads`. Parameters
    /// outside all groups are an error rather than silently skipped.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &IndexMap<String, Tensor<f32>>) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let lr = self
                .lr_for(name)
                .ok_or_else(|| Error::invalid(format!("parameter `{name}` has no learning-rate group")))?;
            let p = params
                .param_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    format!("adam `{name}`"),
                    format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi as f64;
                let mn = beta1 * *mi as f64 + (1.0 - beta1) * gi;
                let vn = beta2 * *vi as f64 + (1.0 - beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *pi = (*pi as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
