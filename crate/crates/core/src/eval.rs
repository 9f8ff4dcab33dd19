//! Accuracy evaluation on a simulated (or ideal digital) device.

use crate::data::{BatchOrder, Dataset};
use crate::nn::ops::{argmax_rows, softmax_cross_entropy};
use crate::nn::{ExecMode, Model, NnError};
use crate::noise::{DeviceInstance, NoiseDraw};

/// First temporal-noise batch index used by calibration passes.
pub const CALIBRATION_BATCH_BASE: u64 = 0;
/// First temporal-noise batch index used when scoring evaluation data, kept
/// apart from the calibration range so the two never share a draw.
pub const EVAL_BATCH_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    /// Top-1 accuracy in percent.
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
}

/// Running tally of predictions.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Tally {
    correct: usize,
    seen: usize,
    loss_sum: f64,
}

impl Tally {
    pub(crate) fn add(&mut self, logits: &[f32], labels: &[usize], classes: usize) {
        let preds = argmax_rows(logits, classes);
        self.correct += preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        let (loss, _) = softmax_cross_entropy::<f32>(logits, labels.len(), classes, labels);
        self.loss_sum += loss * labels.len() as f64;
        self.seen += labels.len();
    }

    pub(crate) fn metrics(&self) -> EvalMetrics {
        let n = self.seen.max(1) as f64;
        EvalMetrics { accuracy: 100.0 * self.correct as f64 / n, loss: self.loss_sum / n, samples: self.seen }
    }
}

/// Eval-mode accuracy with the model's current BatchNorm statistics. Batch `b`
/// of the data uses temporal draw `first_batch + b`.
pub fn evaluate(
    model: &Model,
    device: Option<&DeviceInstance>,
    data: &Dataset,
    batch_size: usize,
    first_batch: u64,
) -> Result<EvalMetrics, NnError> {
    let classes = data.num_classes();
    let mut tally = Tally::default();
    for (b, batch) in data.batches(batch_size, BatchOrder::Sequential, 1).enumerate() {
        let draw = device.map(|d| NoiseDraw::new(d, first_batch + b as u64));
        let out = model.forward(draw, &batch.images, ExecMode::Eval, &[])?;
        tally.add(out.logits.data(), &batch.labels, classes);
    }
    Ok(tally.metrics())
}
