//! PSNR, Fréchet distance between embedding sets, recognition rate, and the
//! symmetric PSD square root the Fréchet distance needs.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::imaging::Image;

pub const PSNR_CAP: f64 = 99.0;
const SYMMETRY_TOL: f64 = 1e-8;
const TRACE_CLAMP: f64 = 1e-6;

/// `10·log10(MAX²/MSE)`; `cap` when the images are identical.
pub fn psnr(a: &Image, b: &Image, cap: f64) -> Result<f64> {
    if (a.height(), a.width(), a.domain()) != (b.height(), b.width(), b.domain()) {
        return Err(Error::shape(
            "psnr",
            format!(
                "{}×{} {:?} vs {}×{} {:?}",
                a.height(),
                a.width(),
                a.domain(),
                b.height(),
                b.width(),
                b.domain()
            ),
        ));
    }
    let n = a.pixels().len() as f64;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(cap);
    }
    let max = a.domain().max_value();
    Ok((10.0 * (max * max / mse).log10()).min(cap))
}

/// `Q·Λ^½·Qᵀ` for a symmetric PSD matrix; eigenvalues down to −1e-8 are
/// treated as zero.
pub fn matrix_sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::invalid(format!("matrix sqrt of a {}×{} matrix", m.nrows(), m.ncols())));
    }
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL {
        return Err(Error::invalid(format!("matrix is not symmetric (max deviation {asym:e})")));
    }
    let eig = SymmetricEigen::new(m.clone());
    if let Some(&low) = eig.eigenvalues.iter().find(|&&v| v < -SYMMETRY_TOL) {
        return Err(Error::invalid(format!("matrix is not positive semidefinite (eigenvalue {low:e})")));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let s = q * DMatrix::from_diagonal(&roots) * q.transpose();
    // average away round-off asymmetry
    Ok((&s + s.transpose()) * 0.5)
}

/// A set of feature vectors, one row per sample.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    vectors: DMatrix<f64>,
    pub source_tag: String,
}

impl EmbeddingSet {
    pub fn new(rows: &[Vec<f64>], source_tag: impl Into<String>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) || d == 0 {
            return Err(Error::shape("embedding set", "rows must share one nonzero length"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding set holds non-finite values"));
        }
        Ok(Self {
            vectors: DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]),
            source_tag: source_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.vectors.row_mean().transpose()
    }

    /// Sample covariance with `1/(N−1)` normalization.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.vectors.row_mean();
        let mut centered = self.vectors.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mu;
        }
        centered.transpose() * &centered / (self.len() as f64 - 1.0)
    }
}

/// Fréchet distance between Gaussians fitted to two embedding sets.
pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("fid", format!("dimension {} vs {}", a.dim(), b.dim())));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("fid needs at least two samples per set"));
    }
    let diff = a.mean() - b.mean();
    let (ca, cb) = (a.covariance(), b.covariance());
    let ra = matrix_sqrt_psd(&ca)?;
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&inner)?;
    let trace = ca.trace() + cb.trace() - 2.0 * cross.trace();
    if trace < -TRACE_CLAMP {
        return Err(Error::invalid(format!("fid trace term {trace:e} is negative beyond round-off")));
    }
    Ok(diff.norm_squared() + trace.max(0.0))
}

pub fn recognition_rate(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::shape(
            "recognition_rate",
            format!("{} predictions for {} labels", predicted.len(), truth.len()),
        ));
    }
    if truth.is_empty() {
        return Err(Error::invalid("recognition rate of an empty set"));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr_mean: f64,
    pub fid: f64,
    pub recognition_rate: f64,
    pub n_samples: usize,
}

impl MetricReport {
    pub const TSV_HEADER: &'static str = "row\tpsnr_mean\tfid\trecognition_rate\tn_samples";

    /// `key: value` lines, each key prefixed with `row.`.
    pub fn to_text(&self, row: &str) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("psnr_mean", format!("{:.6}", self.psnr_mean)),
            ("fid", format!("{:.6}", self.fid)),
            ("recognition_rate", format!("{:.6}", self.recognition_rate)),
            ("n_samples", self.n_samples.to_string()),
        ] {
            writeln!(s, "{row}.{k}: {v}").expect("string write");
        }
        s
    }

    pub fn to_tsv_row(&self, row: &str) -> String {
        format!(
            "{row}\t{}\t{}\t{}\t{}",
            self.psnr_mean, self.fid, self.recognition_rate, self.n_samples
        )
    }

    /// Parses a row produced by [`MetricReport::to_tsv_row`].
    pub fn from_tsv_row(line: &str) -> Result<(String, MetricReport)> {
        let f: Vec<&str> = line.trim_end().split('\t').collect();
        let bad = || Error::invalid(format!("malformed report row `{line}`"));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok((
            f[0].to_string(),
            MetricReport {
                psnr_mean: num(f[1])?,
                fid: num(f[2])?,
                recognition_rate: num(f[3])?,
                n_samples: f[4].parse().map_err(|_| bad())?,
            },
        ))
    }
}
