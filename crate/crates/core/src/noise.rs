//! Analog weight-noise model.
//!
//! A deployed weight is perturbed by a temporal factor `N_T ~ Normal(eta0, (ratio*eta0)^2)`,
//! drawn once per inference batch, and a spatial factor `N_S ~ Normal(1, sigma_s^2)`,
//! drawn once per weight element when a device is instantiated:
//!
//! * MUL: `W + W * N_T * N_S`
//! * ADD: `W + N_T * N_S`
//!
//! Only Conv2d/Linear weights are noised (biases optionally). The master copy of
//! the weights is never modified.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::nn::engine::LayerWeights;
use crate::nn::Model;
use crate::rng::{self, StreamPurpose};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("invalid noise parameter: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Shape(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    Mul,
    Add,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Mul => "mul",
            NoiseKind::Add => "add",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mul" => Ok(NoiseKind::Mul),
            "add" => Ok(NoiseKind::Add),
            _ => Err(format!("unknown noise kind {s:?} (expected mul or add)")),
        }
    }
}

/// Whether one temporal factor is shared by every layer of a batch or each
/// analog layer draws its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalGranularity {
    Global,
    PerLayer,
}

impl fmt::Display for TemporalGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemporalGranularity::Global => "global",
            TemporalGranularity::PerLayer => "per_layer",
        })
    }
}

impl FromStr for TemporalGranularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "global" => Ok(TemporalGranularity::Global),
            "per_layer" => Ok(TemporalGranularity::PerLayer),
            _ => Err(format!("unknown temporal granularity {s:?} (expected global or per_layer)")),
        }
    }
}

pub const DEFAULT_SIGMA_T_RATIO: f64 = 0.2;
pub const DEFAULT_SIGMA_S: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub eta0: f64,
    /// `sigma_T / eta0`.
    pub sigma_t_ratio: f64,
    pub sigma_s: f64,
    pub master_seed: u64,
    pub granularity: TemporalGranularity,
    pub noise_biases: bool,
}

impl NoiseSpec {
    /// Spec with the strict default fluctuation levels (`sigma_T = 0.2 eta0`,
    /// `sigma_S = 0.1`).
    pub fn new(kind: NoiseKind, eta0: f64, master_seed: u64) -> Self {
        Self {
            kind,
            eta0,
            sigma_t_ratio: DEFAULT_SIGMA_T_RATIO,
            sigma_s: DEFAULT_SIGMA_S,
            master_seed,
            granularity: TemporalGranularity::Global,
            noise_biases: false,
        }
    }

    pub fn with_eta0(&self, eta0: f64) -> Self {
        Self { eta0, ..self.clone() }
    }

    pub fn with_seed(&self, master_seed: u64) -> Self {
        Self { master_seed, ..self.clone() }
    }

    pub fn sigma_t(&self) -> f64 {
        self.sigma_t_ratio * self.eta0
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        for (name, v) in [("eta0", self.eta0), ("sigma_t_ratio", self.sigma_t_ratio), ("sigma_s", self.sigma_s)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(NoiseError::InvalidSpec(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// The temporal factor for one inference batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalSample {
    pub value: f64,
    pub batch_index: u64,
}

/// One simulated chip: the noise spec plus spatial masks fixed at instantiation.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceInstance {
    spec: NoiseSpec,
    masks: Vec<Option<Tensor>>,
    bias_masks: Vec<Option<Tensor>>,
}

fn gaussian_tensor(shape: &[usize], mean: f64, std: f64, seed: u64, index: u64) -> Result<Tensor, TensorError> {
    let mut r = rng::stream(seed, StreamPurpose::Spatial, index);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng::gaussian(&mut r, mean, std) as f32).collect();
    Tensor::from_vec(shape, data)
}

/// Draws one spatial mask per analog weight tensor from the stream
/// `(master_seed, spatial, layer_index)`.
pub fn instantiate_device(model: &Model, spec: &NoiseSpec) -> Result<DeviceInstance, NoiseError> {
    spec.validate()?;
    let n = model.layers().len();
    let mut masks = vec![None; n];
    let mut bias_masks = vec![None; n];
    for idx in model.analog_layers() {
        let w = model.weight(idx).expect("analog layer has a weight");
        masks[idx] = Some(gaussian_tensor(w.shape(), 1.0, spec.sigma_s, spec.master_seed, idx as u64)?);
        if spec.noise_biases {
            if let Some(b) = model.bias(idx) {
                let index = (1u64 << 32) | idx as u64;
                bias_masks[idx] = Some(gaussian_tensor(b.shape(), 1.0, spec.sigma_s, spec.master_seed, index)?);
            }
        }
    }
    Ok(DeviceInstance { spec: spec.clone(), masks, bias_masks })
}

impl DeviceInstance {
    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn mask(&self, layer: usize) -> Option<&Tensor> {
        self.masks.get(layer).and_then(Option::as_ref)
    }

    pub fn bias_mask(&self, layer: usize) -> Option<&Tensor> {
        self.bias_masks.get(layer).and_then(Option::as_ref)
    }

    /// `N_T` for a batch, from the stream `(master_seed, temporal, batch_index)`.
    pub fn sample_temporal(&self, batch_index: u64) -> TemporalSample {
        let mut r = rng::stream(self.spec.master_seed, StreamPurpose::Temporal, batch_index);
        TemporalSample { value: rng::gaussian(&mut r, self.spec.eta0, self.spec.sigma_t()), batch_index }
    }

    /// `N_T` seen by a given layer; equal to [`Self::sample_temporal`] unless
    /// the granularity is per-layer.
    pub fn temporal_for_layer(&self, batch_index: u64, layer: usize) -> f64 {
        match self.spec.granularity {
            TemporalGranularity::Global => self.sample_temporal(batch_index).value,
            TemporalGranularity::PerLayer => {
                let index = rng::pair_index(batch_index, layer as u64);
                let mut r = rng::stream(self.spec.master_seed, StreamPurpose::TemporalPerLayer, index);
                rng::gaussian(&mut r, self.spec.eta0, self.spec.sigma_t())
            }
        }
    }

    /// Noisy weights of every analog layer for one batch, indexed by layer.
    pub fn noisy_weights(&self, model: &Model, batch_index: u64) -> Result<Vec<Option<Tensor>>, NoiseError> {
        let mut out = vec![None; model.layers().len()];
        for idx in model.analog_layers() {
            let (w, mask) = match (model.weight(idx), self.mask(idx)) {
                (Some(w), Some(m)) => (w, m),
                _ => return Err(NoiseError::InvalidSpec(format!("device has no mask for layer {idx}"))),
            };
            let nt = self.temporal_for_layer(batch_index, idx);
            out[idx] = Some(noisy_weight(w, mask, nt, self.spec.kind)?);
        }
        Ok(out)
    }

    /// Replaces analog weights in engine form with this batch's realization.
    pub(crate) fn apply(&self, weights: &mut [LayerWeights<f32>], batch_index: u64) -> Result<(), String> {
        if weights.len() != self.masks.len() {
            return Err(format!(
                "device was instantiated for a {}-layer model, not {} layers",
                self.masks.len(),
                weights.len()
            ));
        }
        let mut global = None;
        for (idx, w) in weights.iter_mut().enumerate() {
            let LayerWeights::Affine { weight, bias } = w else { continue };
            let mask = self.masks[idx].as_ref().ok_or_else(|| format!("device has no mask for layer {idx}"))?;
            if mask.len() != weight.len() {
                return Err(format!("mask for layer {idx} has {} elements, weight has {}", mask.len(), weight.len()));
            }
            let nt = match self.spec.granularity {
                TemporalGranularity::Global => *global.get_or_insert_with(|| self.sample_temporal(batch_index).value),
                TemporalGranularity::PerLayer => self.temporal_for_layer(batch_index, idx),
            };
            perturb(weight, mask.data(), nt, self.spec.kind);
            if let (Some(b), Some(bm)) = (bias.as_mut(), self.bias_masks[idx].as_ref()) {
                perturb(b, bm.data(), nt, self.spec.kind);
            }
        }
        Ok(())
    }
}

/// In-place noisy realization of a weight buffer. Evaluated in `f64` and
/// rounded once.
pub(crate) fn perturb(w: &mut [f32], mask: &[f32], nt: f64, kind: NoiseKind) {
    for (v, &s) in w.iter_mut().zip(mask) {
        let orig = *v as f64;
        let noisy = match kind {
            NoiseKind::Mul => orig + orig * nt * s as f64,
            NoiseKind::Add => orig + nt * s as f64,
        };
        *v = noisy as f32;
    }
}

/// `W_noisy` for one weight tensor given the spatial mask and temporal factor.
pub fn noisy_weight(w_orig: &Tensor, mask: &Tensor, nt: f64, kind: NoiseKind) -> Result<Tensor, NoiseError> {
    if w_orig.shape() != mask.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "noisy_weight",
            left: w_orig.shape().to_vec(),
            right: mask.shape().to_vec(),
        }
        .into());
    }
    let mut out = w_orig.clone();
    perturb(out.data_mut(), mask.data(), nt, kind);
    Ok(out)
}

/// A device together with the batch whose temporal factor applies.
#[derive(Debug, Clone, Copy)]
pub struct NoiseDraw<'a> {
    pub device: &'a DeviceInstance,
    pub batch_index: u64,
}

impl<'a> NoiseDraw<'a> {
    pub fn new(device: &'a DeviceInstance, batch_index: u64) -> Self {
        Self { device, batch_index }
    }
}
