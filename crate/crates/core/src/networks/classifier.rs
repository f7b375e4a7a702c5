//! Bottleneck iris classifier: conv stem, four stages of bottleneck units
//! and an embedding head followed by a linear class layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::bottleneck::{bottleneck_forward, BottleneckConfig};
use crate::nn::layers::{batch_norm, conv, dense, dropout, init_bn, init_conv, init_dense, RunState};
use crate::nn::{Graph, ParamStore, Real, Var};

pub const PREFIX: &str = "cls";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub embedding_dim: usize,
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
    pub dropout_rate: f64,
    /// Square input side.
    pub input_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            num_classes: 39,
            embedding_dim: 512,
            stage_blocks: [3, 4, 14, 3],
            stage_channels: [64, 128, 256, 512],
            dropout_rate: 0.4,
            input_size: 256,
        }
    }
}

impl ClassifierConfig {
    /// Narrow widths for desk-scale runs; depth is unchanged.
    pub fn toy(num_classes: usize, input_size: usize) -> Self {
        Self {
            num_classes,
            embedding_dim: 128,
            stage_channels: [16, 32, 64, 128],
            input_size,
            ..Self::default()
        }
    }

    /// The 50-unit layout for full-size runs.
    pub const DEEP_BLOCKS: [usize; 4] = [3, 4, 30, 13];

    pub fn num_bottlenecks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    /// Spatial side entering the head.
    pub fn head_side(&self) -> usize {
        (0..4).fold(self.input_size, |s, _| s.div_ceil(2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        if self.embedding_dim == 0 || self.stage_channels.contains(&0) || self.stage_blocks.contains(&0) {
            return Err(Error::invalid("classifier widths and stage depths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.input_size < 16 {
            return Err(Error::invalid(format!("classifier input {} below 16", self.input_size)));
        }
        Ok(())
    }

    fn blocks(&self) -> impl Iterator<Item = (String, BottleneckConfig)> + '_ {
        let mut in_ch = self.stage_channels[0];
        (0..4).flat_map(move |s| {
            let out = self.stage_channels[s];
            let first_in = in_ch;
            in_ch = out;
            (0..self.stage_blocks[s]).map(move |b| {
                let cfg = BottleneckConfig {
                    in_channels: if b == 0 { first_in } else { out },
                    out_channels: out,
                    stride: if b == 0 { 2 } else { 1 },
                };
                (format!("{PREFIX}.stage{s}.block{b}"), cfg)
            })
        })
    }

    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let c0 = self.stage_channels[0];
        // the stem conv feeds batch norm, so a bias would be inert
        init_conv(store, &format!("{PREFIX}.input.conv"), 3, c0, 3, false, rng);
        init_bn(store, &format!("{PREFIX}.input.bn"), c0);
        for (name, b) in self.blocks() {
            b.init_params(store, &name, rng);
        }
        let c = self.stage_channels[3];
        let side = self.head_side();
        init_bn(store, &format!("{PREFIX}.head.bn"), c);
        init_dense(store, &format!("{PREFIX}.head.fc"), c * side * side, self.embedding_dim, false, rng);
        init_bn(store, &format!("{PREFIX}.head.bn1d"), self.embedding_dim);
        init_dense(store, &format!("{PREFIX}.logits"), self.embedding_dim, self.num_classes, true, rng);
    }
}

pub struct ClassifierOutput {
    /// `[B, num_classes]`
    pub logits: Var,
    /// `[B, embedding_dim]`
    pub embedding: Var,
}

pub fn classifier_forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    st: &mut RunState<T>,
    cfg: &ClassifierConfig,
    image: Var,
) -> Result<ClassifierOutput> {
    cfg.validate()?;
    let shape = g.shape(image).to_vec();
    let n = cfg.input_size;
    if shape.len() != 4 || shape[1..] != [3, n, n] {
        return Err(Error::shape("classifier", format!("expected [B,3,{n},{n}], got {shape:?}")));
    }
    let x = conv(g, p, &format!("{PREFIX}.input.conv"), image, 1, 1, false)?;
    let x = batch_norm(g, p, st, &format!("{PREFIX}.input.bn"), x)?;
    let mut x = g.relu(x);
    for (name, b) in cfg.blocks() {
        x = bottleneck_forward(g, p, st, &b, &name, x)?;
    }
    let x = batch_norm(g, p, st, &format!("{PREFIX}.head.bn"), x)?;
    let x = dropout(g, st, x, cfg.dropout_rate)?;
    let x = g.flatten(x)?;
    let x = dense(g, p, &format!("{PREFIX}.head.fc"), x, false)?;
    let embedding = batch_norm(g, p, st, &format!("{PREFIX}.head.bn1d"), x)?;
    let logits = dense(g, p, &format!("{PREFIX}.logits"), embedding, true)?;
    Ok(ClassifierOutput { logits, embedding })
}
