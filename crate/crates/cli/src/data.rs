use std::path::{Path, PathBuf};

use anyhow::Context;
use pimnb::data::{load_cifar10_bin, load_mnist_idx, synthetic_blobs, Dataset, Split, SyntheticConfig};
use pimnb::rng::pair_index;

use crate::config::{ConfigError, RunConfig};

pub const DATA_DIR_ENV: &str = "PIMNB_DATA_DIR";

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// `data.path`, falling back to `$PIMNB_DATA_DIR`.
fn data_dir(cfg: &RunConfig) -> Result<PathBuf, ConfigError> {
    let raw = cfg.raw("data.path");
    let dir = if raw.is_empty() { std::env::var(DATA_DIR_ENV).unwrap_or_default() } else { raw.to_string() };
    if dir.is_empty() {
        return Err(ConfigError::invalid("data.path", format!("required for this data.kind (or set {DATA_DIR_ENV})")));
    }
    let dir = PathBuf::from(dir);
    if !dir.is_dir() {
        return Err(ConfigError::invalid("data.path", format!("{} is not a directory", dir.display())));
    }
    Ok(dir)
}

fn existing(dir: &Path, names: &[&str]) -> Result<Vec<PathBuf>, ConfigError> {
    names
        .iter()
        .map(|n| {
            let p = dir.join(n);
            if p.is_file() {
                Ok(p)
            } else {
                Err(ConfigError::invalid("data.path", format!("{} not found", p.display())))
            }
        })
        .collect()
}

fn limit(d: Dataset, n: usize) -> anyhow::Result<Dataset> {
    Ok(if n > 0 && n < d.len() { d.take(n)? } else { d })
}

pub fn load(cfg: &RunConfig) -> anyhow::Result<Splits> {
    let seed: u64 = cfg.get("data.seed")?;
    let val_fraction: f64 = cfg.get("data.val_fraction")?;
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(ConfigError::invalid("data.val_fraction", "must be in (0, 1)").into());
    }
    let (full, test) = match cfg.raw("data.kind") {
        "synthetic" => {
            let classes: usize = cfg.get("data.classes")?;
            let n: usize = cfg.get("data.n_per_class")?;
            let n_test: usize = cfg.get("data.test_per_class")?;
            let size: usize = cfg.get("data.image_size")?;
            if classes == 0 || n == 0 || n_test == 0 || size < 4 {
                return Err(ConfigError::invalid("data", "classes, n_per_class and test_per_class must be > 0, image_size >= 4").into());
            }
            let train = synthetic_blobs(&SyntheticConfig::new(n, classes, size, seed)).context("synthetic data")?;
            let test = synthetic_blobs(&SyntheticConfig::new(n_test, classes, size, pair_index(seed, 1))).context("synthetic data")?;
            (train, test)
        }
        "mnist" => {
            let dir = data_dir(cfg)?;
            let f = existing(
                &dir,
                &["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"],
            )?;
            (load_mnist_idx(&f[0], &f[1])?, load_mnist_idx(&f[2], &f[3])?)
        }
        "cifar10" => {
            let dir = data_dir(cfg)?;
            let train = existing(
                &dir,
                &["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"],
            )?;
            let test = existing(&dir, &["test_batch.bin"])?;
            (load_cifar10_bin(&train)?, load_cifar10_bin(&test)?)
        }
        other => {
            return Err(ConfigError::invalid("data.kind", format!("unknown kind {other:?} (synthetic, mnist, cifar10)")).into())
        }
    };
    let (train, val) = full.split_off_validation(val_fraction, seed)?;
    let train = limit(train, cfg.get("data.limit_train")?)?;
    let mut test = limit(test.with_split(Split::Test), cfg.get("data.limit_test")?)?;
    let mut splits = Splits { train, val, test: test.clone() };
    if cfg.get_bool("data.normalize")? {
        let (mean, std) = splits.train.channel_stats();
        splits.train = splits.train.normalize(&mean, &std)?;
        splits.val = splits.val.normalize(&mean, &std)?;
        test = test.normalize(&mean, &std)?;
        splits.test = test;
    }
    Ok(splits)
}
