//! Test-set evaluation: degrade each HQ image, restore it, and score the
//! restored images against a no-restoration baseline.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{degrade_to_lq, derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::metrics::{fid, psnr, recognition_rate, EmbeddingSet, MetricReport};
use crate::networks::{classifier, encoder, restorer};
use crate::nn::ParamStore;
use crate::training::stages::{full_template, load_groups};
use crate::training::{classify_images, restore_images, Checkpoint};

pub const RESTORED_ROW: &str = "restored";
pub const BASELINE_ROW: &str = "degraded_baseline";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Restored images classified by the main classifier.
    pub restored: MetricReport,
    /// Degraded images, unrestored, classified by the baseline classifier.
    pub degraded_baseline: MetricReport,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = self.restored.to_text(RESTORED_ROW);
        s.push_str(&self.degraded_baseline.to_text(BASELINE_ROW));
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", MetricReport::TSV_HEADER);
        let _ = writeln!(s, "{}", self.restored.to_tsv_row(RESTORED_ROW));
        let _ = writeln!(s, "{}", self.degraded_baseline.to_tsv_row(BASELINE_ROW));
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MetricReport::TSV_HEADER) {
            return Err(Error::invalid("report lacks the expected header"));
        }
        let (mut restored, mut baseline) = (None, None);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (row, r) = MetricReport::from_tsv_row(line)?;
            match row.as_str() {
                RESTORED_ROW => restored = Some(r),
                BASELINE_ROW => baseline = Some(r),
                other => return Err(Error::invalid(format!("unknown report row `{other}`"))),
            }
        }
        match (restored, baseline) {
            (Some(restored), Some(degraded_baseline)) => Ok(Self {
                restored,
                degraded_baseline,
            }),
            _ => Err(Error::invalid("report needs both restored and baseline rows")),
        }
    }
}

fn assemble(cfg: &RunConfig, restorer_ckpt: &Checkpoint, classifier_ckpt: &Checkpoint) -> Result<ParamStore<f32>> {
    let mut store = full_template(cfg, 0);
    let r: Vec<String> = [encoder::PREFIX, restorer::MAPPING_PREFIX, restorer::DECODER_PREFIX]
        .iter()
        .map(|p| format!("{p}."))
        .collect();
    load_groups(&mut store, &restorer_ckpt.params, &r, "restorer checkpoint")?;
    load_groups(&mut store, &classifier_ckpt.params, &[format!("{}.", classifier::PREFIX)], "classifier checkpoint")?;
    Ok(store)
}

fn mean_psnr(a: &[Image], b: &[&Image], cap: f64) -> Result<f64> {
    let v = a.iter().zip(b).map(|(x, y)| psnr(x, y, cap)).collect::<Result<Vec<_>>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores every HQ record of `test`. Record `i` is degraded with seed
/// `derive_seed(seed, i)`. FID for both rows is measured in the main
/// classifier's embedding space against the clean images; the baseline
/// row's recognition uses `baseline` when given, else the main
/// classifier.
pub fn evaluate(
    restorer_ckpt: &Checkpoint,
    classifier_ckpt: &Checkpoint,
    baseline: Option<&Checkpoint>,
    test: &Dataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    let hq_idx = test.hq_indices();
    if hq_idx.len() < 2 {
        return Err(Error::invalid("evaluation needs at least two hq test images"));
    }
    let hq: Vec<&Image> = hq_idx.iter().map(|&i| &test.images[i]).collect();
    let labels = test.labels(&hq_idx);
    let degraded: Vec<Image> = hq
        .par_iter()
        .enumerate()
        .map(|(i, img)| degrade_to_lq(img, &cfg.degradation, derive_seed(seed, i as u64)))
        .collect::<Result<_>>()?;
    let degraded_refs: Vec<&Image> = degraded.iter().collect();

    let main = assemble(cfg, restorer_ckpt, classifier_ckpt)?;
    let restored = restore_images(&main, &cfg.restorer_config(), &degraded_refs)?;
    let restored_refs: Vec<&Image> = restored.iter().collect();

    let (_, emb_clean) = classify_images(&main, &cfg.classifier, &hq)?;
    let (pred_restored, emb_restored) = classify_images(&main, &cfg.classifier, &restored_refs)?;
    let (_, emb_degraded) = classify_images(&main, &cfg.classifier, &degraded_refs)?;
    let pred_degraded = match baseline {
        Some(b) => {
            let store = assemble(cfg, restorer_ckpt, b)?;
            classify_images(&store, &cfg.classifier, &degraded_refs)?.0
        }
        None => classify_images(&main, &cfg.classifier, &degraded_refs)?.0,
    };

    let clean = EmbeddingSet::new(&emb_clean, "clean")?;
    let cap = cfg.metrics.psnr_cap;
    let n = hq.len();
    Ok(EvalReport {
        restored: MetricReport {
            psnr_mean: mean_psnr(&restored, &hq, cap)?,
            fid: fid(&clean, &EmbeddingSet::new(&emb_restored, RESTORED_ROW)?)?,
            recognition_rate: recognition_rate(&pred_restored, &labels)?,
            n_samples: n,
        },
        degraded_baseline: MetricReport {
            psnr_mean: mean_psnr(&degraded, &hq, cap)?,
            fid: fid(&clean, &EmbeddingSet::new(&emb_degraded, BASELINE_ROW)?)?,
            recognition_rate: recognition_rate(&pred_degraded, &labels)?,
            n_samples: n,
        },
    })
}
