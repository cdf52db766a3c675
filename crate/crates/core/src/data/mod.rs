//! Dataset ingestion (IDX), batching with seeded shuffles, augmentation, and a
//! procedural digit generator for building IDX fixtures.

mod idx;
pub mod synth;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx, write_idx};

use crate::error::{Error, Result};
use crate::nn::Normalization;
use crate::tensor::Tensor;

/// Images in `[0, 1]` with integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let [n, ..] = images.dims4()?;
        if n != labels.len() {
            return Err(Error::Length {
                got: labels.len(),
                expected: n,
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Label {
                label,
                classes: class_count,
            });
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        Dataset::new(
            self.images.slice_batch(0, n)?,
            self.labels[..n].to_vec(),
            self.class_count,
        )
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn normalization(&self) -> Normalization {
        let [n, c, h, w] = self.images.dims4().expect("dataset images are NCHW");
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, plane) in self.images.data().chunks_exact(h * w).enumerate() {
            for &v in plane {
                mean[i % c] += v as f64;
                sq[i % c] += (v as f64) * (v as f64);
            }
        }
        let count = (n * h * w) as f64;
        let mut out = Normalization {
            mean: vec![0.0; c],
            std: vec![1.0; c],
        };
        for ch in 0..c {
            let m = mean[ch] / count;
            let var = (sq[ch] / count - m * m).max(0.0);
            out.mean[ch] = m as f32;
            out.std[ch] = if var > 0.0 { var.sqrt() as f32 } else { 1.0 };
        }
        out
    }

    pub fn batches(&self, batch_size: usize, seed: u64, shuffle: bool) -> Batches<'_> {
        batches(self, batch_size, seed, shuffle)
    }
}

/// Iterator over `(images, labels)` mini-batches. Covers each example once;
/// the last batch may be short.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches(data: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Batches<'_> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Batches {
        data,
        order,
        batch_size: batch_size.max(1),
        pos: 0,
    }
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let images = self.data.images.gather_batch(idx).expect("indices in range");
        let labels = idx.iter().map(|&i| self.data.labels[i]).collect();
        Some((images, labels))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentOptions {
    /// Zero padding before the random crop; 0 disables cropping.
    pub random_crop_pad: usize,
    pub hflip: bool,
}

/// Per image: zero-pad, crop back to size at a random offset, then flip
/// horizontally with probability ½.
pub fn augment_batch(images: &Tensor, rng: &mut impl Rng, opts: AugmentOptions) -> Result<Tensor> {
    let [n, c, h, w] = images.dims4()?;
    if opts.random_crop_pad == 0 && !opts.hflip {
        return Ok(images.clone());
    }
    let pad = opts.random_crop_pad as isize;
    let mut out = images.clone();
    let src = images.data();
    for i in 0..n {
        let (dy, dx) = if pad > 0 {
            (
                rng.random_range(-pad as i64..=pad as i64) as isize,
                rng.random_range(-pad as i64..=pad as i64) as isize,
            )
        } else {
            (0, 0)
        };
        let flip = opts.hflip && rng.random_bool(0.5);
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    out.data_mut()[base + y * w + x] =
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            src[base + sy as usize * w + sx as usize]
                        } else {
                            0.0
                        };
                }
            }
        }
    }
    Ok(out)
}
