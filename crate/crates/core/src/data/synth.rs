//! Seeded synthetic datasets. Pixel values are on the 1/255 grid so archives
//! round-trip exactly.

use rand::Rng;

use super::{DatasetSplits, Split};
use crate::error::Result;
use crate::init;
use crate::tensor::Tensor;

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn gaussian(rng: &mut impl Rng) -> f32 {
    // Box-Muller; one draw per call keeps the stream easy to reason about.
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

/// Oriented sinusoidal gratings with random phase. Classes are the cartesian
/// product of `angles_deg × freqs`, angle-major.
#[derive(Clone, Debug, PartialEq)]
pub struct StripeTask {
    pub size: usize,
    pub angles_deg: Vec<f32>,
    /// Cycles across the image width.
    pub freqs: Vec<f32>,
    pub contrast: f32,
    pub noise: f32,
}

impl StripeTask {
    /// Four orientations at one frequency.
    pub fn source(size: usize) -> Self {
        StripeTask {
            size,
            angles_deg: vec![0.0, 45.0, 90.0, 135.0],
            freqs: vec![3.0],
            contrast: 0.8,
            noise: 0.08,
        }
    }

    /// Orientations offset from the source, two frequencies, lower contrast
    /// and more noise.
    pub fn shifted_target(size: usize) -> Self {
        StripeTask {
            size,
            angles_deg: vec![22.5, 112.5],
            freqs: vec![2.0, 4.5],
            contrast: 0.5,
            noise: 0.12,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.angles_deg.len() * self.freqs.len()
    }

    fn image(&self, class: usize, rng: &mut impl Rng, out: &mut Vec<f32>) {
        let angle = self.angles_deg[class / self.freqs.len()].to_radians();
        let freq = self.freqs[class % self.freqs.len()];
        let phase = rng.gen_range(0.0..std::f32::consts::TAU);
        let jitter = rng.gen_range(-4.0f32..4.0).to_radians();
        let (s, c) = (angle + jitter).sin_cos();
        let k = std::f32::consts::TAU * freq / self.size as f32;
        for y in 0..self.size {
            for x in 0..self.size {
                let u = x as f32 * c + y as f32 * s;
                let v = 0.5 + 0.5 * self.contrast * (k * u + phase).sin() + self.noise * gaussian(rng);
                out.push(quantize(v));
            }
        }
    }

    /// `n_per_class` samples per class, interleaved by class.
    pub fn generate(&self, n_per_class: usize, prefix: &str, seed: u64) -> Result<Split> {
        let k = self.num_classes();
        let mut rng = init::rng(seed);
        let mut data = Vec::with_capacity(n_per_class * k * self.size * self.size);
        let (mut labels, mut ids) = (Vec::new(), Vec::new());
        for i in 0..n_per_class {
            for class in 0..k {
                self.image(class, &mut rng, &mut data);
                labels.push(class);
                ids.push(format!("{prefix}{class}_{i:06}"));
            }
        }
        let images = Tensor::new(vec![n_per_class * k, self.size, self.size, 1], data)?;
        Split::new(images, labels, ids, k)
    }

    pub fn splits(&self, train: usize, val: usize, test: usize, seed: u64) -> Result<DatasetSplits> {
        DatasetSplits::new(
            self.generate(train, "train_", init::derive_seed(seed, 0, "train"))?,
            self.generate(val, "val_", init::derive_seed(seed, 1, "val"))?,
            self.generate(test, "test_", init::derive_seed(seed, 2, "test"))?,
            self.num_classes(),
        )
    }
}

/// Two classes: a bright Gaussian blob on a dark background, or the
/// reverse, at a random position.
pub fn blobs(n_per_class: usize, size: usize, prefix: &str, seed: u64) -> Result<Split> {
    let mut rng = init::rng(seed);
    let mut data = Vec::with_capacity(2 * n_per_class * size * size);
    let (mut labels, mut ids) = (Vec::new(), Vec::new());
    for i in 0..n_per_class {
        for class in 0..2 {
            let cx = rng.gen_range(0.25..0.75) * size as f32;
            let cy = rng.gen_range(0.25..0.75) * size as f32;
            let r = size as f32 * rng.gen_range(0.15..0.3);
            for y in 0..size {
                for x in 0..size {
                    let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                    let blob = (-d2 / (2.0 * r * r)).exp();
                    let v = if class == 0 { 0.15 + 0.7 * blob } else { 0.85 - 0.7 * blob };
                    data.push(quantize(v + 0.05 * gaussian(&mut rng)));
                }
            }
            labels.push(class);
            ids.push(format!("{prefix}{class}_{i:06}"));
        }
    }
    Split::new(Tensor::new(vec![2 * n_per_class, size, size, 1], data)?, labels, ids, 2)
}

pub fn blob_splits(train: usize, val: usize, test: usize, size: usize, seed: u64) -> Result<DatasetSplits> {
    DatasetSplits::new(
        blobs(train, size, "train_", init::derive_seed(seed, 0, "train"))?,
        blobs(val, size, "val_", init::derive_seed(seed, 1, "val"))?,
        blobs(test, size, "test_", init::derive_seed(seed, 2, "test"))?,
        2,
    )
}

/// Uniform noise images with balanced labels; useful where only counts and
/// ids matter.
pub fn noise_split(n_per_class: usize, num_classes: usize, shape: [usize; 3], prefix: &str, seed: u64) -> Result<Split> {
    let mut rng = init::rng(seed);
    let [h, w, c] = shape;
    let n = n_per_class * num_classes;
    let images = Tensor::from_fn(&[n, h, w, c], |_| rng.gen_range(0u8..=255) as f32 / 255.0);
    let labels = (0..n).map(|i| i % num_classes).collect();
    let ids = (0..n).map(|i| format!("{prefix}{}_{:06}", i % num_classes, i / num_classes)).collect();
    Split::new(images, labels, ids, num_classes)
}
