use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::kernel::{make_aniso_kernel, make_iso_kernel, BlurKernel, KernelKind};
use super::{Domain, Image};
use crate::error::{Error, Result};

/// One concrete draw of the degradation model.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationSpec {
    pub kernel: BlurKernel,
    pub scale: usize,
    /// Noise standard deviation on the 0..255 scale.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::invalid("scale must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise sigma must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Distribution over [`DegradationSpec`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationParams {
    pub kernel_kinds: Vec<KernelKind>,
    pub kind_probs: Vec<f64>,
    pub kernel_size: usize,
    pub iso_sigma_range: [f64; 2],
    pub aniso_sigma_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub scale: usize,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            kernel_kinds: vec![KernelKind::Iso, KernelKind::Aniso],
            kind_probs: vec![0.5, 0.5],
            kernel_size: 41,
            iso_sigma_range: [0.1, 10.0],
            aniso_sigma_range: [0.8, 8.0],
            noise_sigma_range: [0.0, 20.0],
            scale: 4,
        }
    }
}

impl DegradationParams {
    /// Parameters whose every draw leaves the image untouched.
    pub fn identity() -> Self {
        Self {
            kernel_kinds: vec![KernelKind::Iso],
            kind_probs: vec![1.0],
            kernel_size: 3,
            iso_sigma_range: [1e-6, 1e-6],
            aniso_sigma_range: [1e-6, 1e-6],
            noise_sigma_range: [0.0, 0.0],
            scale: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_kinds.is_empty() || self.kernel_kinds.len() != self.kind_probs.len() {
            return Err(Error::invalid(
                "kernel_kinds and kind_probs must be nonempty and equally long",
            ));
        }
        if self.kind_probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::invalid("kind_probs must be nonnegative"));
        }
        let total: f64 = self.kind_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("kind_probs sum to {total}, expected 1")));
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid("kernel_size must be odd and at least 3"));
        }
        if self.scale == 0 {
            return Err(Error::invalid("scale must be at least 1"));
        }
        for (name, [lo, hi], min) in [
            ("iso_sigma_range", self.iso_sigma_range, f64::MIN_POSITIVE),
            ("aniso_sigma_range", self.aniso_sigma_range, f64::MIN_POSITIVE),
            ("noise_sigma_range", self.noise_sigma_range, 0.0),
        ] {
            if !(lo <= hi) || lo < min || !hi.is_finite() {
                return Err(Error::invalid(format!("{name} [{lo}, {hi}] is not a valid range")));
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws one degradation from `params`; a pure function of `(params, seed)`.
pub fn sample_degradation(params: &DegradationParams, seed: u64) -> Result<DegradationSpec> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut kind = *params.kernel_kinds.last().expect("validated nonempty");
    for (k, p) in params.kernel_kinds.iter().zip(&params.kind_probs) {
        acc += p;
        if u < acc {
            kind = *k;
            break;
        }
    }
    let kernel = match kind {
        KernelKind::Iso => {
            let sigma = uniform(&mut rng, params.iso_sigma_range);
            make_iso_kernel(sigma, params.kernel_size)?
        }
        KernelKind::Aniso => {
            let sx = uniform(&mut rng, params.aniso_sigma_range);
            let sy = uniform(&mut rng, params.aniso_sigma_range);
            let theta = rng.random_range(0.0..PI);
            make_aniso_kernel(sx, sy, theta, params.kernel_size)?
        }
    };
    let noise_sigma = uniform(&mut rng, params.noise_sigma_range);
    Ok(DegradationSpec {
        kernel,
        scale: params.scale,
        noise_sigma,
        seed: rng.next_u64(),
    })
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Blur with reflect padding, subsample every `scale`-th pixel from offset
/// 0, add Gaussian noise of std `noise_sigma/255`, clip to `[0, 1]`.
///
/// Only the retained output positions are convolved. The kernels produced
/// here are point-symmetric, so correlation and convolution coincide.
pub fn degrade(image: &Image, spec: &DegradationSpec) -> Result<Image> {
    spec.validate()?;
    if image.domain() != Domain::Unit {
        return Err(Error::invalid("degrade expects a unit-domain image"));
    }
    let (h, w) = (image.height(), image.width());
    let ks = spec.kernel.size();
    if ks > h || ks > w {
        return Err(Error::invalid(format!(
            "kernel of size {ks} exceeds the {h}x{w} image"
        )));
    }
    let r = spec.kernel.radius() as isize;
    let s = spec.scale;
    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
    let src = image.pixels();
    let mut out = vec![0.0; oh * ow * Image::CHANNELS];
    for oy in 0..oh {
        let y = (oy * s) as isize;
        for ox in 0..ow {
            let x = (ox * s) as isize;
            let mut acc = [0.0f64; 3];
            for ki in 0..ks {
                let sy = reflect(y + ki as isize - r, h);
                let row = sy * w;
                for kj in 0..ks {
                    let wgt = spec.kernel.at(ki, kj);
                    let sx = reflect(x + kj as isize - r, w);
                    let p = (row + sx) * Image::CHANNELS;
                    acc[0] += wgt * src[p];
                    acc[1] += wgt * src[p + 1];
                    acc[2] += wgt * src[p + 2];
                }
            }
            let o = (oy * ow + ox) * Image::CHANNELS;
            out[o..o + 3].copy_from_slice(&acc);
        }
    }
    if spec.noise_sigma > 0.0 {
        let std = spec.noise_sigma / 255.0;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for v in out.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += std * n;
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Image::from_raw(oh, ow, Domain::Unit, out))
}
