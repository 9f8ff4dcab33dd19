//! Noise-aware BatchNorm calibration.
//!
//! The trained model is run on the noisy device over training data. Every
//! BatchNorm layer normalizes with the current mini-batch moments, and those
//! moments feed a per-layer calibrated store:
//!
//! ```text
//! first batch:  mu_C = mu,                  var_C = var
//! afterwards:   mu_C = m*mu_C + (1-m)*mu,   var_C = m*var_C + (1-m)*var
//! ```
//!
//! with `m = 0.999` by default. The final store replaces the model's running
//! statistics. Dynamic calibration keeps applying the same update to test
//! batches after they have been scored.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{BatchOrder, Dataset, Split};
use crate::eval::{EvalMetrics, Tally};
use crate::nn::{ExecMode, Model, NnError};
use crate::noise::{DeviceInstance, NoiseDraw};

pub const DEFAULT_CALIBRATION_MOMENTUM: f64 = 0.999;
/// Fewer calibration batches than this leave the m = 0.999 EMA dominated by
/// its first batches.
pub const RECOMMENDED_MIN_BATCHES: usize = 1000;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration data is empty (no batch of at least 2 samples)")]
    EmptyData,
    #[error("calibration batch size must be >= 2, got {0}")]
    InsufficientBatch(usize),
    #[error("invalid calibration config: {0}")]
    InvalidConfig(String),
    #[error("layer {layer}: invalid moments ({reason})")]
    InvalidMoments { layer: usize, reason: String },
    #[error("refusing to calibrate on the test split")]
    TestSplit,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// How test batches are scored when dynamic calibration is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynamicScoring {
    /// Score with the stats as they were before this batch, then update.
    PreUpdate,
    /// Score with this batch's own moments (Calibrate-mode logits), then update.
    BatchStats,
}

impl fmt::Display for DynamicScoring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DynamicScoring::PreUpdate => "pre_update",
            DynamicScoring::BatchStats => "batch_stats",
        })
    }
}

impl FromStr for DynamicScoring {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pre_update" => Ok(DynamicScoring::PreUpdate),
            "batch_stats" => Ok(DynamicScoring::BatchStats),
            _ => Err(format!("unknown dynamic scoring {s:?} (expected pre_update or batch_stats)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub momentum: f64,
    pub passes: usize,
    pub batch_size: usize,
    pub dynamic: bool,
    pub dynamic_scoring: DynamicScoring,
    /// Permit calibrating on data tagged as the test split.
    pub allow_test_split: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            momentum: DEFAULT_CALIBRATION_MOMENTUM,
            passes: 1,
            batch_size: 32,
            dynamic: false,
            dynamic_scoring: DynamicScoring::PreUpdate,
            allow_test_split: false,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(CalibrationError::InvalidConfig(format!("momentum must be in (0, 1), got {}", self.momentum)));
        }
        if self.passes == 0 {
            return Err(CalibrationError::InvalidConfig("passes must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(CalibrationError::InsufficientBatch(self.batch_size));
        }
        Ok(())
    }
}

/// Calibrated mean/variance for one BatchNorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// The calibrated store: one entry per BatchNorm layer, `None` until the
/// layer has seen its first batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedStats {
    layers: BTreeMap<usize, Option<LayerStats>>,
    batches_seen: usize,
}

impl CalibratedStats {
    /// Uninitialized store for every BatchNorm layer of `model`.
    pub fn new(model: &Model) -> Self {
        Self { layers: model.bn_layers().into_iter().map(|l| (l, None)).collect(), batches_seen: 0 }
    }

    /// Store initialized from the model's current running statistics.
    pub fn from_model(model: &Model) -> Self {
        let layers = model
            .bn_layers()
            .into_iter()
            .map(|l| {
                let s = model.bn_stats(l).expect("BatchNorm layer");
                let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect();
                (l, Some(LayerStats { mean: f(&s.running_mean), var: f(&s.running_var) }))
            })
            .collect();
        Self { layers, batches_seen: 0 }
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerStats> {
        self.layers.get(&layer).and_then(Option::as_ref)
    }

    pub fn is_initialized(&self, layer: usize) -> bool {
        self.layer(layer).is_some()
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }

    /// Mini-batches folded in so far.
    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    /// One update of a single layer; other layers are untouched.
    pub fn step(&mut self, layer: usize, batch_mean: &[f64], batch_var: &[f64], momentum: f64) -> Result<(), CalibrationError> {
        let invalid = |reason: String| CalibrationError::InvalidMoments { layer, reason };
        if batch_mean.len() != batch_var.len() {
            return Err(invalid(format!("{} means vs {} variances", batch_mean.len(), batch_var.len())));
        }
        if let Some(v) = batch_var.iter().find(|&&v| !(v >= 0.0)) {
            return Err(invalid(format!("negative variance {v}")));
        }
        let slot = self.layers.get_mut(&layer).ok_or_else(|| invalid("not a BatchNorm layer".into()))?;
        match slot {
            None => *slot = Some(LayerStats { mean: batch_mean.to_vec(), var: batch_var.to_vec() }),
            Some(s) => {
                if s.mean.len() != batch_mean.len() {
                    return Err(invalid(format!("{} channels, store has {}", batch_mean.len(), s.mean.len())));
                }
                for (c, &b) in s.mean.iter_mut().zip(batch_mean) {
                    *c = momentum * *c + (1.0 - momentum) * b;
                }
                for (c, &b) in s.var.iter_mut().zip(batch_var) {
                    *c = momentum * *c + (1.0 - momentum) * b;
                }
            }
        }
        Ok(())
    }

    /// Writes every initialized layer into the model's running statistics.
    pub fn install(&self, model: &mut Model) {
        for (&layer, stats) in &self.layers {
            if let (Some(s), Some(bn)) = (stats, model.bn_stats_mut(layer)) {
                for (dst, &v) in bn.running_mean.iter_mut().zip(&s.mean) {
                    *dst = v as f32;
                }
                for (dst, &v) in bn.running_var.iter_mut().zip(&s.var) {
                    *dst = v as f32;
                }
            }
        }
    }

    fn absorb(&mut self, moments: &[crate::nn::BatchMoments], momentum: f64) -> Result<(), CalibrationError> {
        for m in moments {
            self.step(m.layer, &m.mean, &m.var, momentum)?;
        }
        self.batches_seen += 1;
        Ok(())
    }
}

/// Pure form of [`CalibratedStats::step`].
pub fn calibration_step(
    stats: &CalibratedStats,
    layer: usize,
    batch_mean: &[f64],
    batch_var: &[f64],
    momentum: f64,
) -> Result<CalibratedStats, CalibrationError> {
    let mut next = stats.clone();
    next.step(layer, batch_mean, batch_var, momentum)?;
    Ok(next)
}

/// Calibrates the BatchNorm statistics of `model` for `device` using `data`
/// (the training split), then installs them into the model.
///
/// Batch `b` (counted across passes) uses temporal draw
/// `CALIBRATION_BATCH_BASE + b`.
pub fn calibrate(
    model: &mut Model,
    device: &DeviceInstance,
    data: &Dataset,
    cfg: &CalibrationConfig,
) -> Result<CalibratedStats, CalibrationError> {
    cfg.validate()?;
    if data.split() == Split::Test && !cfg.allow_test_split {
        return Err(CalibrationError::TestSplit);
    }
    if data.len() < 2 {
        return Err(CalibrationError::EmptyData);
    }
    let mut stats = CalibratedStats::new(model);
    let mut index = crate::eval::CALIBRATION_BATCH_BASE;
    for _ in 0..cfg.passes {
        for batch in data.batches(cfg.batch_size, BatchOrder::Sequential, 2) {
            let out = model.forward(Some(NoiseDraw::new(device, index)), &batch.images, ExecMode::Calibrate, &[])?;
            stats.absorb(&out.moments, cfg.momentum)?;
            index += 1;
        }
    }
    stats.install(model);
    Ok(stats)
}

/// Scores `test_data` batch by batch; when `cfg.dynamic` is set, each batch's
/// noisy activations then update the calibrated statistics (installed into
/// the model immediately, so the next batch sees them).
///
/// Batch `b` uses temporal draw `first_batch + b`.
pub fn eval_with_dynamic_calibration(
    model: &mut Model,
    device: &DeviceInstance,
    test_data: &Dataset,
    cfg: &CalibrationConfig,
    first_batch: u64,
) -> Result<(EvalMetrics, CalibratedStats), CalibrationError> {
    cfg.validate()?;
    if test_data.is_empty() {
        return Err(CalibrationError::EmptyData);
    }
    let classes = test_data.num_classes();
    let mut stats = CalibratedStats::from_model(model);
    let mut tally = Tally::default();
    for (b, batch) in test_data.batches(cfg.batch_size, BatchOrder::Sequential, 1).enumerate() {
        let draw = NoiseDraw::new(device, first_batch + b as u64);
        let can_update = cfg.dynamic && batch.labels.len() >= 2;
        if !can_update || cfg.dynamic_scoring == DynamicScoring::PreUpdate {
            let out = model.forward(Some(draw), &batch.images, ExecMode::Eval, &[])?;
            tally.add(out.logits.data(), &batch.labels, classes);
        }
        if can_update {
            let out = model.forward(Some(draw), &batch.images, ExecMode::Calibrate, &[])?;
            if cfg.dynamic_scoring == DynamicScoring::BatchStats {
                tally.add(out.logits.data(), &batch.labels, classes);
            }
            stats.absorb(&out.moments, cfg.momentum)?;
            stats.install(model);
        }
    }
    Ok((tally.metrics(), stats))
}
