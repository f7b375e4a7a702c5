//! Iris rasters and the blind degradation model: Gaussian blur with an
//! isotropic or oriented kernel, stride-`s` subsampling, additive Gaussian
//! noise, and the resample step that brings low-quality crops back to the
//! restorer's working resolution.

mod degrade;
mod kernel;
mod resample;

use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};

pub use degrade::{degrade, sample_degradation, DegradationParams, DegradationSpec};
pub use kernel::{make_aniso_kernel, make_iso_kernel, BlurKernel, KernelKind};
pub use resample::{resample, ResampleMethod};

/// Value domain of an [`Image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Integer levels in `[0, 255]`.
    Byte8,
    /// Reals in `[0, 1]`.
    Unit,
}

impl Domain {
    pub fn max_value(self) -> f64 {
        match self {
            Domain::Byte8 => 255.0,
            Domain::Unit => 1.0,
        }
    }
}

/// An `H×W×3` raster stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    domain: Domain,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, domain: Domain, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::invalid(format!(
                "pixel buffer holds {} values, expected {}",
                data.len(),
                height * width * Self::CHANNELS
            )));
        }
        let max = domain.max_value();
        if let Some(bad) = data.iter().find(|v| !(0.0..=max).contains(*v)) {
            return Err(Error::invalid(format!(
                "pixel value {bad} outside the {domain:?} domain"
            )));
        }
        Ok(Self {
            height,
            width,
            domain,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, domain: Domain, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            domain,
            vec![value; height * width * Self::CHANNELS],
        )
    }

    /// Builds an image without range validation. Callers guarantee the
    /// domain contract.
    pub(crate) fn from_raw(height: usize, width: usize, domain: Domain, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * Self::CHANNELS);
        Self {
            height,
            width,
            domain,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * Self::CHANNELS + c]
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn to_unit(&self) -> Image {
        match self.domain {
            Domain::Unit => self.clone(),
            Domain::Byte8 => Image::from_raw(
                self.height,
                self.width,
                Domain::Unit,
                self.data.iter().map(|v| v / 255.0).collect(),
            ),
        }
    }

    /// Quantizes to integer levels (round half away from zero).
    pub fn to_byte8(&self) -> Image {
        match self.domain {
            Domain::Byte8 => self.clone(),
            Domain::Unit => Image::from_raw(
                self.height,
                self.width,
                Domain::Byte8,
                self.data
                    .iter()
                    .map(|v| (v * 255.0).round().clamp(0.0, 255.0))
                    .collect(),
            ),
        }
    }

    /// Swaps channel order according to `perm` (output channel `c` takes
    /// input channel `perm[c]`).
    pub fn permute_channels(&self, perm: [usize; 3]) -> Image {
        let mut data = vec![0.0; self.data.len()];
        for (dst, src) in data
            .chunks_exact_mut(Self::CHANNELS)
            .zip(self.data.chunks_exact(Self::CHANNELS))
        {
            for c in 0..Self::CHANNELS {
                dst[c] = src[perm[c]];
            }
        }
        Image::from_raw(self.height, self.width, self.domain, data)
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        let data = img.as_raw().iter().map(|&v| v as f64).collect();
        Image::from_raw(
            img.height() as usize,
            img.width() as usize,
            Domain::Byte8,
            data,
        )
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.to_byte8().data.iter().map(|&v| v as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    /// Loads an 8-bit image from disk and converts it to the unit domain.
    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        Ok(Image::from_rgb8(&img).to_unit())
    }

    /// Writes the image as an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}
