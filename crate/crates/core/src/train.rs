//! Backpropagation, SGD with momentum, and the noise-injection training
//! baseline.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

use crate::data::{BatchOrder, Dataset};
use crate::eval::{evaluate, Tally, EVAL_BATCH_BASE};
use crate::nn::engine::{self, LayerGrads, LayerWeights, Tape};
use crate::nn::ops::softmax_cross_entropy;
use crate::nn::{BatchMoments, ExecMode, LayerParams, LayerSpec, Model, NnError};
use crate::noise::{instantiate_device, DeviceInstance, NoiseDraw, NoiseError, NoiseKind, NoiseSpec};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training data has no batch of at least 2 samples")]
    EmptyData,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(format!("unknown schedule {s:?} (expected constant or cosine)")),
        }
    }
}

/// Learning rate at step `t` of `total`. The cosine schedule starts at `lr0`
/// and reaches 0 on the final step.
pub fn learning_rate(schedule: Schedule, lr0: f64, t: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => lr0,
        Schedule::Cosine if total <= 1 => lr0,
        Schedule::Cosine => {
            let last = (total - 1) as f64;
            lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t.min(total - 1) as f64 / last).cos())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    /// L2 penalty on conv/linear weights (not biases or BatchNorm affine).
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_batch_size: usize,
    /// Train through noisy weights. Spatial masks are redrawn every epoch.
    pub noise: Option<NoiseSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            lr: 0.05,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            eval_batch_size: 200,
            noise: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size must be >= 1".into());
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Percent, from Train-mode predictions made during the epoch.
    pub train_acc: f64,
    /// Percent, Eval mode (on the noisy validation device when training with noise).
    pub val_acc: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,val_acc";

    pub fn csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            s.push_str(&format!("{},{:.6},{:.4},{:.4}\n", r.epoch, r.train_loss, r.train_acc, r.val_acc));
        }
        s
    }
}

/// A Train-mode forward pass with the intermediates needed by [`backward`].
pub struct ForwardRecord {
    weights: Vec<LayerWeights<f32>>,
    tape: Option<Tape<f32>>,
    pub logits: Tensor,
    pub moments: Vec<BatchMoments>,
}

/// Forward pass that keeps a tape when `mode` is Train. The weights used are
/// the noisy realization when `noise` is given.
pub fn record_forward(
    model: &Model,
    noise: Option<NoiseDraw<'_>>,
    batch: &Tensor,
    mode: ExecMode,
) -> Result<ForwardRecord, NnError> {
    if !matches!(batch.rank(), 2 | 4) {
        return Err(NnError::Shape {
            layer: 0,
            kind: model.layers()[0].name(),
            message: format!("batch must be [N, C, H, W] or [N, D], got {:?}", batch.shape()),
        });
    }
    let weights = model.deployed_weights(noise)?;
    let keep = mode == ExecMode::Train;
    let out = engine::run(model.layers(), &weights, batch.data().to_vec(), batch.shape(), mode, &[], keep)?;
    Ok(ForwardRecord { logits: Tensor::from_vec(&out.shape, out.output)?, moments: out.moments, tape: out.tape, weights })
}

/// Mean cross-entropy and the gradient of every trainable parameter. The
/// gradient is taken w.r.t. the weights the forward pass actually used.
pub fn backward(model: &Model, record: &ForwardRecord, labels: &[usize]) -> Result<(f64, Vec<LayerGrads<f32>>), NnError> {
    let tape = record.tape.as_ref().ok_or(NnError::MissingTape)?;
    let shape = record.logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(NnError::Shape {
            layer: model.layers().len() - 1,
            kind: "loss",
            message: format!("logits {:?} vs {} labels", shape, labels.len()),
        });
    }
    let (loss, grad) = softmax_cross_entropy(record.logits.data(), shape[0], shape[1], labels);
    Ok((loss, engine::backward(model.layers(), &record.weights, tape, grad)))
}

/// `f64` loss of a network given in engine form (gradient checking).
pub fn loss_f64(
    layers: &[LayerSpec],
    weights: &[LayerWeights<f64>],
    input: &[f64],
    shape: &[usize],
    labels: &[usize],
    mode: ExecMode,
) -> Result<f64, NnError> {
    let out = engine::run(layers, weights, input.to_vec(), shape, mode, &[], false)?;
    Ok(softmax_cross_entropy(&out.output, out.shape[0], out.shape[1], labels).0)
}

/// `f64` loss and analytic gradients of a network given in engine form.
pub fn loss_and_gradients_f64(
    layers: &[LayerSpec],
    weights: &[LayerWeights<f64>],
    input: &[f64],
    shape: &[usize],
    labels: &[usize],
) -> Result<(f64, Vec<LayerGrads<f64>>), NnError> {
    let out = engine::run(layers, weights, input.to_vec(), shape, ExecMode::Train, &[], true)?;
    let (loss, grad) = softmax_cross_entropy(&out.output, out.shape[0], out.shape[1], labels);
    let tape = out.tape.ok_or(NnError::MissingTape)?;
    Ok((loss, engine::backward(layers, weights, &tape, grad)))
}

/// Straight-through correction from dL/dW_noisy to dL/dW for a multiplicative
/// device: each element scales by `1 + N_T * N_S`. Additive noise leaves the
/// gradient unchanged.
fn noise_chain_rule(grads: &mut [LayerGrads<f32>], device: &DeviceInstance, batch_index: u64) {
    if device.spec().kind == NoiseKind::Add {
        return;
    }
    for (idx, g) in grads.iter_mut().enumerate() {
        let LayerGrads::Affine { weight, bias } = g else { continue };
        let nt = device.temporal_for_layer(batch_index, idx);
        let scale = |g: &mut [f32], mask: &Tensor| {
            for (v, &s) in g.iter_mut().zip(mask.data()) {
                *v = (*v as f64 * (1.0 + nt * s as f64)) as f32;
            }
        };
        if let Some(m) = device.mask(idx) {
            scale(weight, m);
        }
        if let (Some(b), Some(m)) = (bias.as_mut(), device.bias_mask(idx)) {
            scale(b, m);
        }
    }
}

/// SGD with heavy-ball momentum: `v = mu*v + g (+ wd*w)`, `w -= lr*v`.
struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<[Vec<f64>; 2]>,
}

impl Sgd {
    fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        let velocity = model
            .params()
            .iter()
            .map(|p| match p {
                LayerParams::Affine { weight, bias } => {
                    [vec![0.0; weight.len()], vec![0.0; bias.as_ref().map_or(0, Tensor::len)]]
                }
                LayerParams::BatchNorm(s) => [vec![0.0; s.channels()], vec![0.0; s.channels()]],
                LayerParams::None => [Vec::new(), Vec::new()],
            })
            .collect();
        Self { momentum, weight_decay, velocity }
    }

    fn update(v: &mut [f64], w: &mut [f32], g: &[f32], mu: f64, wd: f64, lr: f64) {
        for ((vi, wi), &gi) in v.iter_mut().zip(w.iter_mut()).zip(g) {
            *vi = mu * *vi + gi as f64 + wd * *wi as f64;
            *wi = (*wi as f64 - lr * *vi) as f32;
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[LayerGrads<f32>], lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for (idx, g) in grads.iter().enumerate() {
            let [v0, v1] = &mut self.velocity[idx];
            match g {
                LayerGrads::Affine { weight, bias } => {
                    Self::update(v0, model.weight_mut(idx).expect("affine layer"), weight, mu, wd, lr);
                    if let (Some(gb), Some(b)) = (bias, model.bias_mut(idx)) {
                        Self::update(v1, b, gb, mu, 0.0, lr);
                    }
                }
                LayerGrads::Norm { gamma, beta } => {
                    let s = model.bn_stats_mut(idx).expect("BatchNorm layer");
                    Self::update(v0, &mut s.gamma, gamma, mu, 0.0, lr);
                    Self::update(v1, &mut s.beta, beta, mu, 0.0, lr);
                }
                LayerGrads::None => {}
            }
        }
    }
}

/// Seed of the device used for noisy validation during noise-injection
/// training, kept apart from any seed a caller would use for evaluation.
fn validation_device_seed(master: u64) -> u64 {
    rng::pair_index(master, u64::MAX)
}

/// Trains `model` in place and leaves it holding the snapshot with the best
/// validation accuracy (earliest epoch on ties).
pub fn train(model: &mut Model, train_data: &Dataset, val_data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let per_epoch = train_data.len() / cfg.batch_size + usize::from(train_data.len() % cfg.batch_size >= 2);
    if per_epoch == 0 {
        return Err(TrainError::EmptyData);
    }
    let total = per_epoch * cfg.epochs;
    let classes = train_data.num_classes();
    let val_device = match &cfg.noise {
        Some(spec) => Some(instantiate_device(model, &spec.with_seed(validation_device_seed(spec.master_seed)))?),
        None => None,
    };

    let start = Instant::now();
    let mut sgd = Sgd::new(model, cfg.momentum, cfg.weight_decay);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let device = match &cfg.noise {
            Some(spec) => Some(instantiate_device(model, &spec.with_seed(rng::pair_index(spec.master_seed, epoch as u64)))?),
            None => None,
        };
        let mut tally = Tally::default();
        let mut lr = cfg.lr;
        let order = BatchOrder::Shuffled { seed: cfg.seed, epoch: epoch as u64 };
        for (b, batch) in train_data.batches(cfg.batch_size, order, 2).enumerate() {
            lr = learning_rate(cfg.schedule, cfg.lr, step, total);
            let draw = device.as_ref().map(|d| NoiseDraw::new(d, step as u64));
            let record = record_forward(model, draw, &batch.images, ExecMode::Train)?;
            let (loss, mut grads) = backward(model, &record, &batch.labels)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b });
            }
            if let Some(d) = &device {
                noise_chain_rule(&mut grads, d, step as u64);
            }
            tally.add(record.logits.data(), &batch.labels, classes);
            model.absorb_train_moments(&record.moments);
            sgd.step(model, &grads, lr);
            step += 1;
        }
        let val = evaluate(model, val_device.as_ref(), val_data, cfg.eval_batch_size, EVAL_BATCH_BASE)?;
        let m = tally.metrics();
        records.push(EpochRecord { epoch, train_loss: m.loss, train_acc: m.accuracy, val_acc: val.accuracy, lr });
        if best.as_ref().is_none_or(|(_, acc, _)| val.accuracy > *acc) {
            best = Some((epoch, val.accuracy, model.clone()));
        }
    }
    let (best_epoch, best_val_acc) = match best {
        Some((e, acc, snapshot)) => {
            *model = snapshot;
            (e, acc)
        }
        None => (0, f64::NAN),
    };
    Ok(TrainReport { epochs: records, best_epoch, best_val_acc, wall_seconds: start.elapsed().as_secs_f64() })
}

/// Fine-tunes a trained model through noisy weights drawn from `spec`.
pub fn noise_injection_finetune(
    model: &mut Model,
    train_data: &Dataset,
    val_data: &Dataset,
    spec: &NoiseSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let cfg = TrainConfig { noise: Some(spec.clone()), ..cfg.clone() };
    train(model, train_data, val_data, &cfg)
}
