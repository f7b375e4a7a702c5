//! Procedural iris crops: a dark pupil, a textured annulus and a light
//! surround. The texture is fixed by the class seed; the instance seed only
//! rotates it slightly and jitters brightness.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{Domain, Image};

const PUPIL_LEVEL: f64 = 0.08;
const SCLERA_LEVEL: f64 = 0.82;
const IRIS_OUTER: f64 = 0.9;

struct Wave {
    amp: f64,
    radial: f64,
    angular: f64,
    phase: f64,
}

struct ClassTexture {
    base: f64,
    pupil: f64,
    waves: Vec<Wave>,
    norm: f64,
}

impl ClassTexture {
    fn new(class_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(class_seed);
        let mut waves = Vec::new();
        // purely radial rings, purely angular spokes, and mixed spirals
        for kind in 0..3 {
            for _ in 0..3 {
                let radial = if kind == 1 { 0.0 } else { rng.random_range(0.5..3.5) };
                let angular = if kind == 0 {
                    0.0
                } else {
                    let m: i32 = rng.random_range(1..=5);
                    if rng.random_bool(0.5) { m as f64 } else { -m as f64 }
                };
                waves.push(Wave {
                    amp: rng.random_range(0.3..1.0),
                    radial,
                    angular,
                    phase: rng.random_range(0.0..TAU),
                });
            }
        }
        let norm = waves.iter().map(|w| w.amp).sum();
        Self {
            base: rng.random_range(0.3..0.55),
            pupil: rng.random_range(0.25..0.38),
            waves,
            norm,
        }
    }

    /// Texture in [-1, 1] at normalized band radius `r` and angle `theta`.
    fn at(&self, r: f64, theta: f64) -> f64 {
        self.waves
            .iter()
            .map(|w| w.amp * (TAU * w.radial * r + w.angular * theta + w.phase).sin())
            .sum::<f64>()
            / self.norm
    }
}

fn smoothstep(edge: f64, width: f64, x: f64) -> f64 {
    let t = ((x - edge) / width + 0.5).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders one grayscale iris crop in the unit domain.
pub fn synth_iris(class_seed: u64, instance_seed: u64, size: (usize, usize)) -> Result<Image> {
    let (h, w) = size;
    if h < 16 || w < 16 {
        return Err(Error::invalid(format!("synthetic iris needs at least 16×16, got {h}×{w}")));
    }
    let tex = ClassTexture::new(class_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
    let rotation = rng.random_range(-0.06..0.06);
    let gain = rng.random_range(0.9..1.1);
    let offset = rng.random_range(-0.03..0.03);

    let radius = h.min(w) as f64 / 2.0;
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let edge = 1.0 / radius;
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 + 0.5 - cy) / radius;
            let dx = (x as f64 + 0.5 - cx) / radius;
            let rho = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx) + PI + rotation;
            let band = ((rho - tex.pupil) / (IRIS_OUTER - tex.pupil)).clamp(0.0, 1.0);
            let iris = tex.base + 0.28 * tex.at(band, theta);
            let inside = smoothstep(tex.pupil, edge, rho);
            let outside = smoothstep(IRIS_OUTER, edge, rho);
            let v = PUPIL_LEVEL * (1.0 - inside) + inside * ((1.0 - outside) * iris + outside * SCLERA_LEVEL);
            let v = (v * gain + offset).clamp(0.0, 1.0);
            data.extend_from_slice(&[v, v, v]);
        }
    }
    Image::new(h, w, Domain::Unit, data)
}
