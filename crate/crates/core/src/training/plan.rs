//! What each stage trains, for how long, and at which learning rates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{classifier, discriminator, encoder, restorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PriorPretrain,
    ClassifierTrain,
    RestorerFinetune,
    ClassifierFinetuneOnRestored,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::PriorPretrain,
        Stage::ClassifierTrain,
        Stage::RestorerFinetune,
        Stage::ClassifierFinetuneOnRestored,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Stage::PriorPretrain => "prior_pretrain",
            Stage::ClassifierTrain => "classifier_train",
            Stage::RestorerFinetune => "restorer_finetune",
            Stage::ClassifierFinetuneOnRestored => "classifier_finetune_on_restored",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.tag() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}`")))
    }
}

/// Iterations are optimizer steps for the GAN stages and epochs for the
/// classifier stages.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub iterations: usize,
    pub batch_size: usize,
    /// `(parameter-name prefix, learning rate)`.
    pub lr_groups: Vec<(String, f64)>,
    /// Prefixes whose parameters must come out byte-identical.
    pub frozen: Vec<String>,
}

fn dot(prefix: &str) -> String {
    format!("{prefix}.")
}

impl StagePlan {
    pub fn prior_pretrain(steps: usize, batch_size: usize, lr_generator: f64, lr_discriminator: f64) -> Self {
        Self {
            stage: Stage::PriorPretrain,
            iterations: steps,
            batch_size,
            lr_groups: vec![
                (dot(restorer::MAPPING_PREFIX), lr_generator),
                (dot(restorer::DECODER_PREFIX), lr_generator),
                (dot(discriminator::PREFIX), lr_discriminator),
            ],
            frozen: vec![],
        }
    }

    pub fn classifier_train(epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            stage: Stage::ClassifierTrain,
            iterations: epochs,
            batch_size,
            lr_groups: vec![(dot(classifier::PREFIX), lr)],
            frozen: vec![],
        }
    }

    /// The decoder side (mapping network included) runs at 10× and the
    /// discriminator at 100× the encoder rate.
    pub fn restorer_finetune(steps: usize, batch_size: usize, encoder_lr: f64) -> Self {
        Self {
            stage: Stage::RestorerFinetune,
            iterations: steps,
            batch_size,
            lr_groups: vec![
                (dot(encoder::PREFIX), encoder_lr),
                (dot(restorer::MAPPING_PREFIX), encoder_lr * 10.0),
                (dot(restorer::DECODER_PREFIX), encoder_lr * 10.0),
                (dot(discriminator::PREFIX), encoder_lr * 100.0),
            ],
            frozen: vec![dot(classifier::PREFIX)],
        }
    }

    pub fn classifier_finetune(epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            stage: Stage::ClassifierFinetuneOnRestored,
            iterations: epochs,
            batch_size,
            lr_groups: vec![(dot(classifier::PREFIX), lr)],
            frozen: vec![
                dot(encoder::PREFIX),
                dot(restorer::MAPPING_PREFIX),
                dot(restorer::DECODER_PREFIX),
            ],
        }
    }

    pub fn lr(&self, prefix: &str) -> Option<f64> {
        self.lr_groups.iter().find(|(p, _)| p == prefix).map(|&(_, lr)| lr)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid(format!("{}: batch size must be positive", self.stage)));
        }
        for (p, lr) in &self.lr_groups {
            if !(lr.is_finite() && *lr > 0.0) {
                return Err(Error::invalid(format!("{}: learning rate for `{p}` must be positive, got {lr}", self.stage)));
            }
            if self.is_frozen(p) {
                return Err(Error::invalid(format!("{}: `{p}` is both trained and frozen", self.stage)));
            }
        }
        Ok(())
    }

    /// Human-readable summary, one group per line.
    pub fn describe(&self) -> String {
        let mut s = format!("stage: {}\niterations: {}\nbatch_size: {}\n", self.stage, self.iterations, self.batch_size);
        for (p, lr) in &self.lr_groups {
            s.push_str(&format!("lr[{p}]: {lr:e}\n"));
        }
        for p in &self.frozen {
            s.push_str(&format!("frozen: {p}\n"));
        }
        s
    }
}
