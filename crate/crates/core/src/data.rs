//! In-memory image datasets and the synthetic blob generator.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::IMAGE_CHANNELS;
use crate::tensor::Tensor;

/// Noise standard deviation of synthetic samples.
pub const SYNTHETIC_NOISE: f64 = 0.1;

/// Channel-last images in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, H, W, 3]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[3] != IMAGE_CHANNELS {
            return Err(Error::Input(format!("dataset images must be [N, H, W, 3], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::Input(format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[2]
    }

    fn sample_len(&self) -> usize {
        self.height() * self.width() * IMAGE_CHANNELS
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images.data()[index * n..(index + 1) * n]
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let images = Tensor::new([indices.len(), self.height(), self.width(), IMAGE_CHANNELS], data)?;
        Ok((images, labels))
    }
}

fn quantize(v: f64) -> f32 {
    let level = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    level as f32 / 255.0
}

/// Noise-free image of class `class`: a Gaussian blob whose position and
/// colour depend on the class, on a dim grey background.
pub fn class_mean(class: usize, num_classes: usize, resolution: usize) -> Vec<f64> {
    let r = resolution as f64;
    let angle = 2.0 * PI * class as f64 / num_classes as f64;
    let (cy, cx) = (r * (0.5 + 0.28 * angle.sin()), r * (0.5 + 0.28 * angle.cos()));
    let sigma = r / 6.0;
    // hue spread over the classes, one channel per third of the wheel
    let color: [f64; 3] = core::array::from_fn(|ch| {
        let phase = angle - 2.0 * PI * ch as f64 / 3.0;
        0.5 + 0.5 * phase.cos()
    });
    let mut out = Vec::with_capacity(resolution * resolution * IMAGE_CHANNELS);
    for y in 0..resolution {
        for x in 0..resolution {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let blob = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            for c in color {
                out.push(0.1 + 0.8 * c * blob);
            }
        }
    }
    out
}

/// Class-balanced Gaussian-blob images with additive noise, quantized to
/// 8-bit levels so they survive the packed dataset format exactly.
///
/// Sample `i` has label `i % num_classes`.
pub fn make_synthetic(num_classes: usize, per_class: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || resolution == 0 {
        return Err(Error::Input("classes, per_class and resolution must be positive".into()));
    }
    let means: Vec<Vec<f64>> = (0..num_classes).map(|c| class_mean(c, num_classes, resolution)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SYNTHETIC_NOISE).expect("positive std");
    let total = num_classes * per_class;
    let mut data = Vec::with_capacity(total * means[0].len());
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % num_classes;
        labels.push(class);
        data.extend(means[class].iter().map(|&m| quantize(m + noise.sample(&mut rng))));
    }
    let images = Tensor::new([total, resolution, resolution, IMAGE_CHANNELS], data)?;
    Dataset::new(images, labels, num_classes)
}
