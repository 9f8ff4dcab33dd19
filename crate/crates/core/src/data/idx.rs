//! MNIST IDX files (big-endian).

use std::path::Path;

use super::{DataError, Dataset, Split};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

fn be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DataError::Truncated { path: path.to_string(), offset: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32, path: &str) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic { path: path.to_string(), expected, found });
    }
    Ok(())
}

/// Returns `(count, rows, cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<(usize, usize, usize, Vec<f32>), DataError> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(DataError::Truncated { path: path.to_string(), offset: bytes.len() });
    }
    let pixels = bytes[16..need].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<usize>, DataError> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(DataError::Truncated { path: path.to_string(), offset: bytes.len() });
    }
    let labels: Vec<usize> = bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    if let Some((record, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(DataError::Label { path: path.to_string(), record, label, classes: 10 });
    }
    Ok(labels)
}

pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (n, rows, cols, pixels) = parse_idx_images(&read(ip)?, &ip.display().to_string())?;
    let labels = parse_idx_labels(&read(lp)?, &lp.display().to_string())?;
    if labels.len() != n {
        return Err(DataError::CountMismatch { images: n, labels: labels.len() });
    }
    if n == 0 {
        return Err(DataError::Invalid("IDX file holds no images".into()));
    }
    let images = Tensor::from_vec(&[n, 1, rows, cols], pixels)?;
    Dataset::new(images, labels, 10, Split::Train)
}
