use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Iso,
    Aniso,
}

/// A normalized, odd-sized 2-D Gaussian blur kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    weights: Vec<f64>,
    size: usize,
    kind: KernelKind,
    sigma_x: f64,
    sigma_y: f64,
    theta: f64,
}

impl BlurKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Row-major `size×size` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < 3 || size % 2 == 0 {
        return Err(Error::invalid(format!(
            "kernel size must be odd and at least 3, got {size}"
        )));
    }
    Ok(())
}

fn check_sigma(name: &str, sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("{name} must be positive, got {sigma}")));
    }
    Ok(())
}

fn normalized(size: usize, mut f: impl FnMut(f64, f64) -> f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut weights = Vec::with_capacity(size * size);
    for i in 0..size {
        let dy = i as f64 - r;
        for j in 0..size {
            let dx = j as f64 - r;
            weights.push(f(dx, dy));
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    weights
}

/// Circularly symmetric Gaussian with standard deviation `sigma` pixels.
pub fn make_iso_kernel(sigma: f64, size: usize) -> Result<BlurKernel> {
    check_sigma("sigma", sigma)?;
    check_size(size)?;
    let denom = 2.0 * sigma * sigma;
    let weights = normalized(size, |dx, dy| (-(dx * dx + dy * dy) / denom).exp());
    Ok(BlurKernel {
        weights,
        size,
        kind: KernelKind::Iso,
        sigma_x: sigma,
        sigma_y: sigma,
        theta: 0.0,
    })
}

/// Oriented Gaussian with covariance `R(θ)·diag(σx², σy²)·R(θ)ᵀ`.
///
/// `theta` is reduced into `[0, π)`; the Gaussian is invariant under a half
/// turn so nothing is lost.
pub fn make_aniso_kernel(sigma_x: f64, sigma_y: f64, theta: f64, size: usize) -> Result<BlurKernel> {
    check_sigma("sigma_x", sigma_x)?;
    check_sigma("sigma_y", sigma_y)?;
    check_size(size)?;
    if !theta.is_finite() {
        return Err(Error::invalid("theta must be finite"));
    }
    let theta = theta.rem_euclid(PI);
    let (s, c) = theta.sin_cos();
    let (ix, iy) = (1.0 / (sigma_x * sigma_x), 1.0 / (sigma_y * sigma_y));
    // inverse covariance R·diag(1/σx², 1/σy²)·Rᵀ
    let a = c * c * ix + s * s * iy;
    let b = c * s * (ix - iy);
    let d = s * s * ix + c * c * iy;
    let weights = normalized(size, |dx, dy| {
        (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + d * dy * dy)).exp()
    });
    Ok(BlurKernel {
        weights,
        size,
        kind: KernelKind::Aniso,
        sigma_x,
        sigma_y,
        theta,
    })
}
