//! CIFAR-10 binary batches: records of 1 label byte followed by 3072 pixel
//! bytes in channel-planar (R, G, B) 32x32 order.

use std::path::Path;

use super::{DataError, Dataset, Split};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
pub const RECORD_LEN: usize = 1 + PIXELS;

pub(crate) fn parse_cifar(bytes: &[u8], path: &str, labels: &mut Vec<usize>, pixels: &mut Vec<f32>) -> Result<(), DataError> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(DataError::PartialRecord {
            path: path.to_string(),
            len: bytes.len(),
            record: RECORD_LEN,
            offset: bytes.len() / RECORD_LEN * RECORD_LEN,
        });
    }
    for (record, chunk) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        let label = chunk[0] as usize;
        if label > 9 {
            return Err(DataError::Label { path: path.to_string(), record, label, classes: 10 });
        }
        labels.push(label);
        pixels.extend(chunk[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset, DataError> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = std::fs::read(p).map_err(|source| DataError::Io { path: p.display().to_string(), source })?;
        parse_cifar(&bytes, &p.display().to_string(), &mut labels, &mut pixels)?;
    }
    if labels.is_empty() {
        return Err(DataError::Invalid("no CIFAR-10 records found".into()));
    }
    let images = Tensor::from_vec(&[labels.len(), 3, SIDE, SIDE], pixels)?;
    Dataset::new(images, labels, 10, Split::Train)
}
