#![allow(dead_code)]

use pimnb::data::{synthetic_blobs, Dataset, Split, SyntheticConfig};
use pimnb::train::{train, TrainConfig};
use pimnb::Model;

pub const IMAGE_SIZE: usize = 16;
pub const CLASSES: usize = 3;

/// 3-class blobs, 512 per class, split 90/10, plus a separately seeded test set.
pub fn reference_data(seed: u64) -> (Dataset, Dataset, Dataset) {
    let full = synthetic_blobs(&SyntheticConfig::new(512, CLASSES, IMAGE_SIZE, seed)).unwrap();
    let (train, val) = full.split_off_validation(0.1, seed).unwrap();
    let test = synthetic_blobs(&SyntheticConfig::new(200, CLASSES, IMAGE_SIZE, seed + 1000))
        .unwrap()
        .with_split(Split::Test);
    (train, val, test)
}

pub fn trained_reference(seed: u64, train_data: &Dataset, val: &Dataset) -> Model {
    let mut model = Model::reference_cnn(1, CLASSES, seed).unwrap();
    train(&mut model, train_data, val, &TrainConfig { seed, ..TrainConfig::default() }).unwrap();
    model
}
