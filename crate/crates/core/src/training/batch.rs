//! Moving images in and out of NCHW tensors, and deterministic batch
//! orders.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{Domain, Image};
use crate::nn::Tensor;

/// Stacks unit-range images into `[B, 3, H, W]`.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = (first.height(), first.width());
    let c = Image::CHANNELS;
    let mut data = vec![0f32; images.len() * c * h * w];
    for (b, img) in images.iter().enumerate() {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::shape(
                "image batch",
                format!("{}x{} among {h}x{w} images", img.height(), img.width()),
            ));
        }
        let unit;
        let src = if img.domain() == Domain::Unit {
            img.pixels()
        } else {
            unit = img.to_unit();
            unit.pixels()
        };
        let out = &mut data[b * c * h * w..(b + 1) * c * h * w];
        for (p, px) in src.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * h * w + p] = v as f32;
            }
        }
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Batch item `b` of a `[B, 3, H, W]` tensor as a unit-domain image,
/// clamped to `[0, 1]`.
pub fn tensor_to_image(t: &Tensor<f32>, b: usize) -> Result<Image> {
    let s = t.shape();
    if s.len() != 4 || s[1] != Image::CHANNELS || b >= s[0] {
        return Err(Error::shape("tensor_to_image", format!("item {b} of {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let src = &t.data()[b * 3 * plane..(b + 1) * 3 * plane];
    let mut data = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            data.push((src[ch * plane + p] as f64).clamp(0.0, 1.0));
        }
    }
    Image::new(h, w, Domain::Unit, data)
}

/// One shuffled pass over `0..n` cut into batches. A trailing batch of
/// one joins the previous batch so training-mode batch norm always sees
/// at least two samples.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

/// Endless stream of fixed-size batches drawn without replacement within
/// each reshuffled pass.
pub struct BatchCycler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCycler {
    pub fn new(n: usize, rng: ChaCha8Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("cannot draw batches from an empty set"));
        }
        Ok(Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng,
        })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tensor_round_trip() {
        let data: Vec<f64> = (0..4 * 5 * 3).map(|i| i as f64 / 60.0).collect();
        let img = Image::new(4, 5, Domain::Unit, data).unwrap();
        let t = images_to_tensor(&[&img, &img]).unwrap();
        assert_eq!(t.shape(), [2, 3, 4, 5]);
        // channel-planar layout: red plane first
        assert_eq!(t.data()[1], img.get(0, 1, 0) as f32);
        assert_eq!(t.data()[20], img.get(0, 0, 1) as f32);
        let back = tensor_to_image(&t, 1).unwrap();
        for (a, b) in back.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn byte_images_are_scaled() {
        let img = Image::filled(2, 2, Domain::Byte8, 255.0).unwrap();
        assert!(images_to_tensor(&[&img]).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mixed_sizes_are_rejected() {
        let a = Image::filled(2, 2, Domain::Unit, 0.0).unwrap();
        let b = Image::filled(2, 3, Domain::Unit, 0.0).unwrap();
        assert!(images_to_tensor(&[&a, &b]).is_err());
        assert!(images_to_tensor(&[]).is_err());
    }

    #[test]
    fn epochs_cover_everything_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (n, bs) in [(17, 16), (32, 16), (5, 2), (1, 16)] {
            let b = epoch_batches(n, bs, &mut rng);
            let mut all: Vec<usize> = b.concat();
            all.sort();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            if n > 1 {
                assert!(b.iter().all(|x| x.len() >= 2), "{n} {bs}: {b:?}");
            }
        }
    }

    #[test]
    fn cycler_is_deterministic_and_balanced() {
        let mut a = BatchCycler::new(6, ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut b = BatchCycler::new(6, ChaCha8Rng::seed_from_u64(1)).unwrap();
        let xs: Vec<usize> = (0..3).flat_map(|_| a.next_batch(4)).collect();
        let ys: Vec<usize> = (0..3).flat_map(|_| b.next_batch(4)).collect();
        assert_eq!(xs, ys);
        let mut first_pass = xs[..6].to_vec();
        first_pass.sort();
        assert_eq!(first_pass, (0..6).collect::<Vec<_>>());
        assert!(BatchCycler::new(0, ChaCha8Rng::seed_from_u64(1)).is_err());
    }
}
