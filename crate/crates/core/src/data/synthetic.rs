//! Procedural class-conditional blob images for download-free runs.
//!
//! Class `k` of `K` places a Gaussian blob near a fixed point on a circle
//! around the image centre (angle `2*pi*k/K`); each sample jitters the blob
//! position, width and brightness and adds pixel noise.

use std::f64::consts::PI;

use super::{DataError, Dataset, Split};
use crate::rng::{self, StreamPurpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_per_class: usize,
    pub classes: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Radius of the class-centre circle, as a fraction of the image side.
    pub radius: f64,
    /// Std of the per-sample blob position jitter, fraction of the side.
    pub jitter: f64,
    /// Blob width, fraction of the side.
    pub blob_sigma: f64,
    /// Std of additive pixel noise.
    pub pixel_noise: f64,
    /// Constant pixel level the blob sits on.
    pub background: f64,
}

impl SyntheticConfig {
    pub fn new(n_per_class: usize, classes: usize, image_size: usize, seed: u64) -> Self {
        Self {
            n_per_class,
            classes,
            image_size,
            seed,
            radius: 0.25,
            jitter: 0.08,
            blob_sigma: 0.12,
            pixel_noise: 0.15,
            background: 4.0,
        }
    }
}

pub fn synthetic_blobs(cfg: &SyntheticConfig) -> Result<Dataset, DataError> {
    if cfg.n_per_class == 0 || cfg.classes == 0 || cfg.image_size == 0 {
        return Err(DataError::Invalid("synthetic dataset parameters must be positive".into()));
    }
    let s = cfg.image_size;
    let side = s as f64;
    let n = cfg.n_per_class * cfg.classes;
    let mut pixels = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % cfg.classes;
        let mut r = rng::stream(cfg.seed, StreamPurpose::Synthetic, i as u64);
        let angle = 2.0 * PI * class as f64 / cfg.classes as f64;
        let centre = (side - 1.0) / 2.0;
        let cx = centre + cfg.radius * side * angle.cos() + rng::gaussian(&mut r, 0.0, cfg.jitter * side);
        let cy = centre + cfg.radius * side * angle.sin() + rng::gaussian(&mut r, 0.0, cfg.jitter * side);
        let sigma = cfg.blob_sigma * side * (1.0 + rng::gaussian(&mut r, 0.0, 0.15)).max(0.3);
        let amp = 1.0 + rng::gaussian(&mut r, 0.0, 0.15);
        for y in 0..s {
            for x in 0..s {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = cfg.background + amp * (-d2 / (2.0 * sigma * sigma)).exp() + rng::gaussian(&mut r, 0.0, cfg.pixel_noise);
                pixels.push(v as f32);
            }
        }
        labels.push(class);
    }
    let images = Tensor::from_vec(&[n, 1, s, s], pixels)?;
    Dataset::new(images, labels, cfg.classes, Split::Train)
}
