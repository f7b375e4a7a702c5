//! Convolutional encoder: a 1×1 stem at full resolution, then stride-2 3×3
//! convolutions down to 4×4, with spatial attention in the middle and a
//! dense head producing the latent code.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::attention::{attention_forward, AttentionConfig};
use crate::nn::layers::{conv, dense, init_conv, init_dense};
use crate::nn::{Graph, ParamStore, Real, Var};

pub const PREFIX: &str = "enc";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Square input side; a power of two.
    pub input_size: usize,
    /// Output channels per conv layer, shallowest first.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    /// 0-based conv layer after which attention runs; `None` picks the
    /// middle layer.
    pub attention_insert_index: Option<usize>,
    pub attention_heads: usize,
    /// `None` splits the layer width evenly across heads.
    pub attention_dim_per_head: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            channels: vec![128, 256, 512, 512, 512, 512, 512],
            latent_dim: 512,
            attention_insert_index: None,
            attention_heads: 4,
            attention_dim_per_head: None,
        }
    }
}

/// Number of conv layers the stride-2 halving pattern needs to go from
/// `size` down to 4×4.
pub fn depth_for(size: usize) -> Result<usize> {
    if size < 8 || !size.is_power_of_two() {
        return Err(Error::invalid(format!(
            "input size must be a power of two ≥ 8, got {size}"
        )));
    }
    Ok((size / 4).trailing_zeros() as usize + 1)
}

impl EncoderConfig {
    /// Narrow widths for desk-scale runs.
    pub fn toy(input_size: usize) -> Result<Self> {
        let depth = depth_for(input_size)?;
        let mut channels = vec![32; depth];
        channels[0] = 16;
        Ok(Self {
            input_size,
            channels,
            latent_dim: 64,
            attention_insert_index: None,
            attention_heads: 4,
            attention_dim_per_head: None,
        })
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    pub fn deepest_channels(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    pub fn attention_index(&self) -> usize {
        self.attention_insert_index
            .unwrap_or_else(|| self.depth().div_ceil(2) - 1)
    }

    pub fn attention(&self) -> AttentionConfig {
        let c = self.channels[self.attention_index()];
        let heads = self.attention_heads;
        AttentionConfig {
            in_channels: c,
            heads,
            dim_per_head: self.attention_dim_per_head.unwrap_or((c / heads.max(1)).max(1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let depth = depth_for(self.input_size)?;
        if self.channels.len() != depth {
            return Err(Error::invalid(format!(
                "input {} needs {depth} encoder layers, got {} channel entries",
                self.input_size,
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.latent_dim == 0 {
            return Err(Error::invalid("encoder widths must be positive"));
        }
        if self.attention_index() >= depth {
            return Err(Error::invalid(format!(
                "attention index {} outside {depth} layers",
                self.attention_index()
            )));
        }
        self.attention().validate()
    }

    /// `(channels, side)` of each conv layer's output, shallowest first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.channels
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, self.input_size >> i))
            .collect()
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let mut in_ch = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            let k = if i == 0 { 1 } else { 3 };
            init_conv(store, &format!("{PREFIX}.conv{i}"), in_ch, c, k, true, rng);
            in_ch = c;
        }
        self.attention().init_params(store, &format!("{PREFIX}.att"), rng);
        init_dense(store, &format!("{PREFIX}.fc"), in_ch * 16, self.latent_dim, true, rng);
    }
}

pub struct EncoderOutput {
    /// `[B, latent_dim]`
    pub z: Var,
    /// Per-layer feature maps, deepest (4×4) first to match decoder order.
    pub skips: Vec<Var>,
    pub attention_maps: Var,
}

pub fn encoder_forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &EncoderConfig,
    image: Var,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    let shape = g.shape(image).to_vec();
    let n = cfg.input_size;
    if shape.len() != 4 || shape[1..] != [3, n, n] {
        return Err(Error::shape("encoder", format!("expected [B,3,{n},{n}], got {shape:?}")));
    }
    let mut x = image;
    let mut skips = Vec::with_capacity(cfg.depth());
    let mut maps = None;
    for i in 0..cfg.depth() {
        let (stride, pad) = if i == 0 { (1, 0) } else { (2, 1) };
        x = conv(g, p, &format!("{PREFIX}.conv{i}"), x, stride, pad, true)?;
        x = g.relu(x);
        if i == cfg.attention_index() {
            let att = attention_forward(g, p, &cfg.attention(), &format!("{PREFIX}.att"), x)?;
            x = att.out;
            maps = Some(att.maps);
        }
        skips.push(x);
    }
    skips.reverse();
    let flat = g.flatten(x)?;
    let z = dense(g, p, &format!("{PREFIX}.fc"), flat, true)?;
    Ok(EncoderOutput {
        z,
        skips,
        attention_maps: maps.expect("attention index validated"),
    })
}
