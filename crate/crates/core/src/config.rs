//! The run configuration: one TOML document with a section per module.
//! Every field is optional; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::imaging::{DegradationParams, KernelKind};
use crate::losses::LossWeights;
use crate::metrics::PSNR_CAP;
use crate::networks::{ClassifierConfig, DiscriminatorConfig, EncoderConfig, RestorerConfig};
use crate::training::{AdamConfig, StagePlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Square side every image is brought to.
    pub image_size: usize,
    /// Synthetic generation: classes and images per class.
    pub num_classes: usize,
    pub per_class: usize,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            num_classes: 39,
            per_class: 20,
            split: SplitSpec::default(),
        }
    }
}

/// Restorer settings beyond the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestorerSection {
    pub mapping_depth: usize,
    pub demodulate: bool,
    /// Discriminator widths from full resolution down to 4×4; `None`
    /// mirrors the encoder.
    pub discriminator_channels: Option<Vec<usize>>,
}

impl Default for RestorerSection {
    fn default() -> Self {
        let r = RestorerConfig::default();
        Self {
            mapping_depth: r.mapping_depth,
            demodulate: r.demodulate,
            discriminator_channels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorStageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Weight of the real-image gradient penalty; 0 disables it.
    pub r1_gamma: f64,
    /// Probability of switching style codes partway through the decoder.
    pub style_mixing_prob: f64,
    /// Weight of the path-length regularizer; 0 disables it.
    pub path_length_weight: f64,
    /// Fraction of the images held out to track the discriminator loss.
    pub held_out_fraction: f64,
}

impl Default for PriorStageConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            lr_generator: 2e-3,
            lr_discriminator: 2e-3,
            r1_gamma: 0.0,
            style_mixing_prob: 0.0,
            path_length_weight: 0.0,
            held_out_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierStageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierStageConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneStageConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Decoder and discriminator rates are derived from this one.
    pub encoder_lr: f64,
    /// Weight of the real-image gradient penalty on the discriminator.
    pub r1_gamma: f64,
}

impl Default for FinetuneStageConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 2,
            encoder_lr: 2e-4,
            r1_gamma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub adam: AdamConfig,
    pub prior: PriorStageConfig,
    pub classifier: ClassifierStageConfig,
    pub restorer: FinetuneStageConfig,
    pub classifier_finetune: ClassifierStageConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub psnr_cap: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { psnr_cap: PSNR_CAP }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub degradation: DegradationParams,
    pub encoder: EncoderConfig,
    pub restorer: RestorerSection,
    pub classifier: ClassifierConfig,
    pub losses: LossWeights,
    pub training: TrainingConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    /// Narrow networks, a small synthetic set, and a milder degradation
    /// that fits a `size`-pixel image.
    pub fn toy(size: usize) -> Result<Self> {
        let cfg = Self {
            data: DataConfig {
                image_size: size,
                num_classes: 10,
                per_class: 20,
                split: SplitSpec::default(),
            },
            degradation: DegradationParams {
                kernel_kinds: vec![KernelKind::Iso, KernelKind::Aniso],
                kind_probs: vec![0.5, 0.5],
                kernel_size: 7,
                iso_sigma_range: [0.5, 2.0],
                aniso_sigma_range: [0.5, 2.0],
                noise_sigma_range: [0.0, 15.0],
                scale: 2,
            },
            encoder: EncoderConfig::toy(size)?,
            restorer: RestorerSection::default(),
            classifier: ClassifierConfig::toy(10, size),
            training: TrainingConfig {
                restorer: FinetuneStageConfig {
                    encoder_lr: 1e-4,
                    r1_gamma: 10.0,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The fully resolved document, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn restorer_config(&self) -> RestorerConfig {
        RestorerConfig {
            encoder: self.encoder.clone(),
            mapping_depth: self.restorer.mapping_depth,
            demodulate: self.restorer.demodulate,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            input_size: self.encoder.input_size,
            channels: self
                .restorer
                .discriminator_channels
                .clone()
                .unwrap_or_else(|| self.encoder.channels.clone()),
        }
    }

    pub fn prior_plan(&self) -> StagePlan {
        let p = &self.training.prior;
        StagePlan::prior_pretrain(p.steps, p.batch_size, p.lr_generator, p.lr_discriminator)
    }

    pub fn classifier_plan(&self) -> StagePlan {
        let c = &self.training.classifier;
        StagePlan::classifier_train(c.epochs, c.batch_size, c.lr)
    }

    pub fn restorer_plan(&self) -> StagePlan {
        let r = &self.training.restorer;
        StagePlan::restorer_finetune(r.steps, r.batch_size, r.encoder_lr)
    }

    pub fn classifier_finetune_plan(&self) -> StagePlan {
        let c = &self.training.classifier_finetune;
        StagePlan::classifier_finetune(c.epochs, c.batch_size, c.lr)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let n = self.data.image_size;
        if self.encoder.input_size != n || self.classifier.input_size != n {
            return bad(format!(
                "data.image_size ({n}), encoder.input_size ({}) and classifier.input_size ({}) must agree",
                self.encoder.input_size, self.classifier.input_size
            ));
        }
        self.restorer_config().validate()?;
        self.discriminator_config().validate()?;
        self.classifier.validate()?;
        self.degradation.validate()?;
        self.losses.validate()?;
        let p = &self.training.prior;
        for (name, v) in [
            ("prior.r1_gamma", p.r1_gamma),
            ("prior.path_length_weight", p.path_length_weight),
            ("restorer.r1_gamma", self.training.restorer.r1_gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("training.{name} must be finite and ≥ 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&p.style_mixing_prob) {
            return bad(format!("training.prior.style_mixing_prob {} outside [0, 1]", p.style_mixing_prob));
        }
        if !(0.0..1.0).contains(&p.held_out_fraction) {
            return bad(format!("training.prior.held_out_fraction {} outside [0, 1)", p.held_out_fraction));
        }
        for plan in [self.prior_plan(), self.classifier_plan(), self.restorer_plan(), self.classifier_finetune_plan()] {
            plan.validate()?;
        }
        if !(self.metrics.psnr_cap > 0.0) {
            return bad(format!("metrics.psnr_cap must be positive, got {}", self.metrics.psnr_cap));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_settings() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.data.image_size, 256);
        assert_eq!(c.classifier.num_classes, 39);
        let s2 = &c.training.classifier;
        assert_eq!((s2.epochs, s2.batch_size, s2.lr), (20, 16, 1e-4));
        assert_eq!(c.training.restorer.batch_size, 2);
        let plan = c.restorer_plan();
        assert_eq!(plan.lr("enc."), Some(2e-4));
        assert_eq!(plan.lr("dec."), Some(2e-3));
        assert_eq!(plan.lr("disc."), Some(2e-2));
        assert_eq!(c.degradation.kind_probs, [0.5, 0.5]);
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_echo_round_trips() {
        for c in [RunConfig::default(), RunConfig::toy(32).unwrap()] {
            assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::parse("[training.classifier]\nepochs = 3\n[degradation]\nscale = 2\n").unwrap();
        assert_eq!(c.training.classifier.epochs, 3);
        assert_eq!(c.training.classifier.batch_size, 16);
        assert_eq!(c.degradation.scale, 2);
        assert_eq!(c.degradation.kernel_size, 41);
    }

    #[test]
    fn unknown_keys_are_named() {
        for (doc, key) in [
            ("[training.classifier]\nepochz = 3\n", "epochz"),
            ("[bogus]\nx = 1\n", "bogus"),
            ("[degradation]\nkernel_sise = 3\n", "kernel_sise"),
        ] {
            match RunConfig::parse(doc) {
                Err(Error::Config(m)) => assert!(m.contains(key), "{m}"),
                other => panic!("{doc}: {other:?}"),
            }
        }
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let mut c = RunConfig::toy(32).unwrap();
        c.classifier.input_size = 64;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn shipped_toy_config_matches_the_preset() {
        let text = include_str!("../../../configs/toy.toml");
        assert_eq!(RunConfig::parse(text).unwrap(), RunConfig::toy(32).unwrap());
    }
}
