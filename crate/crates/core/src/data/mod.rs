//! Datasets, loaders and batching.

mod cifar;
mod idx;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use thiserror::Error;

pub use cifar::load_cifar10_bin;
pub use idx::{load_mnist_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{synthetic_blobs, SyntheticConfig};

use crate::rng::{self, StreamPurpose};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, expected: u32, found: u32 },
    #[error("{path}: truncated at byte offset {offset}")]
    Truncated { path: String, offset: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: file length {len} is not a whole number of {record}-byte records; partial record starts at byte offset {offset}")]
    PartialRecord { path: String, len: usize, record: usize, offset: usize },
    #[error("{path}: label {label} at record {record} is out of range for {classes} classes")]
    Label { path: String, record: usize, label: usize, classes: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

/// Labelled images `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self, DataError> {
        if images.rank() != 4 {
            return Err(DataError::Invalid(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch { images: images.shape()[0], labels: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { images, labels, num_classes, split })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Subset in the given index order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(images, labels, self.num_classes, self.split)
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Result<Dataset, DataError> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Deterministically shuffles, then holds out the last `fraction` as the
    /// validation split.
    pub fn split_off_validation(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, StreamPurpose::Split, 0));
        let n_val = ((self.len() as f64) * fraction).round() as usize;
        let n_val = n_val.clamp(1, self.len().saturating_sub(1).max(1));
        if self.len() < 2 {
            return Err(DataError::Invalid("need at least 2 samples to split".into()));
        }
        let cut = self.len() - n_val;
        let train = self.subset(&order[..cut])?.with_split(Split::Train);
        let val = self.subset(&order[cut..])?.with_split(Split::Val);
        Ok((train, val))
    }

    /// Per-channel mean and population standard deviation over the dataset.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let (m, v) = self.images.moments(&[0, 2, 3]).expect("rank-4 images");
        (
            m.data().iter().map(|&x| x as f64).collect(),
            v.data().iter().map(|&x| (x as f64).sqrt()).collect(),
        )
    }

    /// `(x - mean) / std` per channel.
    pub fn normalize(&self, mean: &[f64], std: &[f64]) -> Result<Dataset, DataError> {
        let c = self.channels();
        if mean.len() != c || std.len() != c {
            return Err(DataError::InvalidTransform(format!("expected {c} channel statistics")));
        }
        if let Some(s) = std.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
            return Err(DataError::InvalidTransform(format!("std must be > 0, got {s}")));
        }
        let area: usize = self.images.shape()[2..].iter().product();
        let mut images = self.images.clone();
        for (i, v) in images.data_mut().iter_mut().enumerate() {
            let ch = (i / area) % c;
            *v = ((*v as f64 - mean[ch]) / std[ch]) as f32;
        }
        Ok(Dataset { images, ..self.clone() })
    }

    /// Inverse of [`Dataset::normalize`].
    pub fn denormalize(&self, mean: &[f64], std: &[f64]) -> Result<Dataset, DataError> {
        let inv_std: Vec<f64> = std.iter().map(|s| 1.0 / s).collect();
        let neg: Vec<f64> = mean.iter().zip(std).map(|(m, s)| -m / s).collect();
        self.normalize(&neg, &inv_std)
    }

    /// Mini-batches in sequential or seeded-shuffle order. Batches smaller than
    /// `min_batch` (only ever the last one) are dropped.
    pub fn batches(&self, batch_size: usize, order: BatchOrder, min_batch: usize) -> Batches<'_> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let BatchOrder::Shuffled { seed, epoch } = order {
            idx.shuffle(&mut rng::stream(seed, StreamPurpose::Shuffle, epoch));
        }
        Batches { data: self, order: idx, pos: 0, batch_size: batch_size.max(1), min_batch }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchOrder {
    Sequential,
    Shuffled { seed: u64, epoch: u64 },
}

pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    min_batch: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let end = (self.pos + self.batch_size).min(self.order.len());
        if end <= self.pos || end - self.pos < self.min_batch {
            return None;
        }
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let images = self.data.images.gather_rows(idx).expect("indices in range");
        let labels = idx.iter().map(|&i| self.data.labels[i]).collect();
        Some(Batch { images, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let images = Tensor::from_vec(&[4, 2, 1, 2], (0..16).map(|v| v as f32 * 0.5).collect()).unwrap();
        Dataset::new(images, vec![0, 1, 2, 1], 3, Split::Train).unwrap()
    }

    #[test]
    fn normalize_identity_and_inverse() {
        let d = small();
        assert_eq!(d.normalize(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), d);
        let (m, s) = d.channel_stats();
        let n = d.normalize(&m, &s).unwrap();
        let (nm, ns) = n.channel_stats();
        assert!(nm.iter().all(|v| v.abs() < 1e-6));
        assert!(ns.iter().all(|v| (v - 1.0).abs() < 1e-5));
        let back = n.denormalize(&m, &s).unwrap();
        for (a, b) in back.images().data().iter().zip(d.images().data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn normalize_rejects_zero_std() {
        assert!(matches!(small().normalize(&[0.0, 0.0], &[1.0, 0.0]), Err(DataError::InvalidTransform(_))));
    }

    #[test]
    fn labels_are_checked() {
        let images = Tensor::zeros(&[2, 1, 1, 1]).unwrap();
        assert!(Dataset::new(images.clone(), vec![0, 3], 3, Split::Train).is_err());
        assert!(matches!(Dataset::new(images, vec![0], 3, Split::Train), Err(DataError::CountMismatch { .. })));
    }

    #[test]
    fn batching_orders() {
        let d = small();
        let seq: Vec<Vec<usize>> = d.batches(3, BatchOrder::Sequential, 1).map(|b| b.labels).collect();
        assert_eq!(seq, vec![vec![0, 1, 2], vec![1]]);
        assert_eq!(d.batches(3, BatchOrder::Sequential, 2).count(), 1);
        let order = BatchOrder::Shuffled { seed: 9, epoch: 2 };
        let a: Vec<Vec<usize>> = d.batches(2, order, 1).map(|b| b.labels).collect();
        let b: Vec<Vec<usize>> = d.batches(2, order, 1).map(|b| b.labels).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn validation_split_is_disjoint_and_deterministic() {
        let d = synthetic_blobs(&SyntheticConfig::new(10, 2, 8, 3)).unwrap();
        let (t1, v1) = d.split_off_validation(0.1, 5).unwrap();
        let (t2, v2) = d.split_off_validation(0.1, 5).unwrap();
        assert_eq!((t1.len(), v1.len()), (18, 2));
        assert_eq!(v1, v2);
        assert_eq!(t1, t2);
        assert_eq!(v1.split(), Split::Val);
    }
}
