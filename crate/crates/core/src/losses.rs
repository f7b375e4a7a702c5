//! Restoration objective: logistic adversarial terms, smooth L1, the
//! cosine identity term, and their weighted sum.
//!
//! Every loss is built on the autodiff graph so it trains directly; the
//! point values in the tests run in 64-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_adv: f64,
    pub w_l1: f64,
    pub w_id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_adv: 1.0,
            w_l1: 1.0,
            w_id: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w_adv", self.w_adv), ("w_l1", self.w_l1), ("w_id", self.w_id)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Non-saturating generator loss: mean softplus(−D(fake)).
pub fn adv_generator_loss<T: Real>(g: &mut Graph<T>, d_fake: Var) -> Var {
    let neg = g.scale(d_fake, -1.0);
    let sp = g.softplus(neg);
    g.mean(sp)
}

/// mean softplus(−D(real)) + mean softplus(D(fake)).
pub fn adv_discriminator_loss<T: Real>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let neg = g.scale(d_real, -1.0);
    let real = g.softplus(neg);
    let real = g.mean(real);
    let fake = g.softplus(d_fake);
    let fake = g.mean(fake);
    g.add(real, fake)
}

/// Huber with unit threshold, averaged over every element.
pub fn smooth_l1<T: Real>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    if g.shape(x) != g.shape(y) {
        return Err(Error::shape(
            "smooth_l1",
            format!("{:?} vs {:?}", g.shape(x), g.shape(y)),
        ));
    }
    let d = g.sub(x, y)?;
    let h = g.huber(d);
    Ok(g.mean(h))
}

/// Mean over the batch of `1 − cos(f_real, f_fake)` for `[B, D]` (or `[D]`)
/// features.
pub fn identity_loss<T: Real>(g: &mut Graph<T>, f_real: Var, f_fake: Var) -> Result<Var> {
    let shape = g.shape(f_real).to_vec();
    if shape != g.shape(f_fake) || shape.is_empty() || shape.len() > 2 {
        return Err(Error::shape(
            "identity_loss",
            format!("{shape:?} vs {:?}", g.shape(f_fake)),
        ));
    }
    let sq_norm = |g: &mut Graph<T>, f: Var| -> Result<Var> {
        let f2 = g.mul(f, f)?;
        let n = g.sum_last(f2)?;
        if g.value(n).data().iter().any(|&v| v.to_f64c() == 0.0) {
            return Err(Error::invalid("identity loss on a zero-norm feature vector"));
        }
        Ok(n)
    };
    let na = sq_norm(g, f_real)?;
    let nb = sq_norm(g, f_fake)?;
    let prod = g.mul(f_real, f_fake)?;
    let dot = g.sum_last(prod)?;
    let denom = g.mul(na, nb)?;
    let inv = g.powf(denom, -0.5);
    let cos = g.mul(dot, inv)?;
    let mean_cos = g.mean(cos);
    let neg = g.scale(mean_cos, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Terms of the weighted objective, kept separately for logging.
pub struct GeneratorLoss {
    pub total: Var,
    pub adv: Var,
    pub l1: Var,
    pub id: Var,
}

pub fn total_generator_loss<T: Real>(
    g: &mut Graph<T>,
    weights: &LossWeights,
    d_fake: Var,
    hq: Var,
    restored: Var,
    f_real: Var,
    f_fake: Var,
) -> Result<GeneratorLoss> {
    let adv = adv_generator_loss(g, d_fake);
    let l1 = smooth_l1(g, restored, hq)?;
    let id = identity_loss(g, f_real, f_fake)?;
    let a = g.scale(adv, weights.w_adv);
    let b = g.scale(l1, weights.w_l1);
    let c = g.scale(id, weights.w_id);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(GeneratorLoss { total, adv, l1, id })
}
