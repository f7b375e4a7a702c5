use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMethod {
    Nearest,
    #[default]
    Bilinear,
}

// (lower index, upper index, weight of upper) per destination coordinate,
// sampling at pixel centers.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn nearest_taps(src: usize, dst: usize) -> Vec<usize> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| (((d as f64 + 0.5) * scale).floor() as usize).min(src - 1))
        .collect()
}

/// Resizes to `target_h × target_w`, keeping the value domain.
pub fn resample(image: &Image, target_h: usize, target_w: usize, method: ResampleMethod) -> Result<Image> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::invalid("target dimensions must be positive"));
    }
    let (h, w) = (image.height(), image.width());
    let c = Image::CHANNELS;
    let src = image.pixels();
    let mut out = Vec::with_capacity(target_h * target_w * c);
    match method {
        ResampleMethod::Nearest => {
            let ys = nearest_taps(h, target_h);
            let xs = nearest_taps(w, target_w);
            for &y in &ys {
                for &x in &xs {
                    let p = (y * w + x) * c;
                    out.extend_from_slice(&src[p..p + c]);
                }
            }
        }
        ResampleMethod::Bilinear => {
            let ys = taps(h, target_h);
            let xs = taps(w, target_w);
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    for ch in 0..c {
                        let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                        out.push(top * (1.0 - fy) + bottom * fy);
                    }
                }
            }
        }
    }
    Ok(Image::from_raw(target_h, target_w, image.domain(), out))
}
