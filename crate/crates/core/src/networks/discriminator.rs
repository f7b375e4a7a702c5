//! Residual downsampling discriminator producing one raw logit per image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::depth_for;
use crate::error::{Error, Result};
use crate::nn::layers::{conv_eq, dense_eq, init_conv_eq, init_dense_eq};
use crate::nn::{Graph, ParamStore, Real, Var};

pub const PREFIX: &str = "disc";
const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub input_size: usize,
    /// Width at each resolution from `input_size` down to 4×4.
    pub channels: Vec<usize>,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let depth = depth_for(self.input_size)?;
        if self.channels.len() != depth || self.channels.contains(&0) {
            return Err(Error::invalid(format!(
                "discriminator at {} needs {depth} positive widths, got {:?}",
                self.input_size, self.channels
            )));
        }
        Ok(())
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let ch = &self.channels;
        init_conv_eq(store, &format!("{PREFIX}.from_rgb"), 3, ch[0], 1, true, rng);
        for i in 0..ch.len() - 1 {
            let b = format!("{PREFIX}.block{i}");
            init_conv_eq(store, &format!("{b}.conv1"), ch[i], ch[i], 3, true, rng);
            init_conv_eq(store, &format!("{b}.conv2"), ch[i], ch[i + 1], 3, true, rng);
            init_conv_eq(store, &format!("{b}.skip"), ch[i], ch[i + 1], 1, false, rng);
        }
        let c = *ch.last().expect("validated");
        init_conv_eq(store, &format!("{PREFIX}.final.conv"), c, c, 3, true, rng);
        init_dense_eq(store, &format!("{PREFIX}.fc1"), c * 16, c, true, rng);
        init_dense_eq(store, &format!("{PREFIX}.fc2"), c, 1, true, rng);
    }
}

/// Scores `[B]`.
pub fn discriminator_forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &DiscriminatorConfig,
    image: Var,
) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(image).to_vec();
    let n = cfg.input_size;
    if shape.len() != 4 || shape[1..] != [3, n, n] {
        return Err(Error::shape("discriminator", format!("expected [B,3,{n},{n}], got {shape:?}")));
    }
    let x = conv_eq(g, p, &format!("{PREFIX}.from_rgb"), image, 1, 0, true)?;
    let mut x = g.leaky_relu(x, SLOPE);
    for i in 0..cfg.channels.len() - 1 {
        let b = format!("{PREFIX}.block{i}");
        let skip = conv_eq(g, p, &format!("{b}.skip"), x, 2, 0, false)?;
        let r = conv_eq(g, p, &format!("{b}.conv1"), x, 1, 1, true)?;
        let r = g.leaky_relu(r, SLOPE);
        let r = conv_eq(g, p, &format!("{b}.conv2"), r, 2, 1, true)?;
        let r = g.leaky_relu(r, SLOPE);
        let sum = g.add(skip, r)?;
        x = g.scale(sum, std::f64::consts::FRAC_1_SQRT_2);
    }
    let x = conv_eq(g, p, &format!("{PREFIX}.final.conv"), x, 1, 1, true)?;
    let x = g.leaky_relu(x, SLOPE);
    let x = g.flatten(x)?;
    let x = dense_eq(g, p, &format!("{PREFIX}.fc1"), x, true)?;
    let x = g.leaky_relu(x, SLOPE);
    let x = dense_eq(g, p, &format!("{PREFIX}.fc2"), x, true)?;
    g.reshape(x, &[shape[0]])
}
