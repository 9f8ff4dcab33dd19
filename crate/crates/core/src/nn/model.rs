use std::collections::BTreeMap;

use super::engine::{self, BatchMoments, LayerWeights, NormWeights};
use super::layer::LayerSpec;
use super::{ExecMode, NnError};
use crate::noise::NoiseDraw;
use crate::rng::{self, StreamPurpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f32 = 1e-5;
/// EMA momentum for running statistics during training:
/// `running <- m * running + (1 - m) * batch`.
pub const TRAIN_BN_MOMENTUM: f32 = 0.9;

/// BatchNorm state for one layer. Variances use the population convention.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub epsilon: f32,
    pub momentum: f32,
}

impl BnStats {
    pub fn new(channels: usize, epsilon: f32) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            epsilon,
            momentum: TRAIN_BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training-mode running-statistics update.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum as f64;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (m * *r as f64 + (1.0 - m) * b) as f32;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = (m * *r as f64 + (1.0 - m) * b) as f32;
        }
    }

    fn check(&self, layer: usize, channels: usize) -> Result<(), NnError> {
        let lens = [self.running_mean.len(), self.running_var.len(), self.gamma.len(), self.beta.len()];
        if lens.iter().any(|&l| l != channels) {
            return Err(NnError::InvalidModel(format!(
                "layer {layer}: BatchNorm vectors {lens:?} do not match {channels} channels"
            )));
        }
        if let Some(c) = self.running_var.iter().position(|&v| !(v >= 0.0)) {
            return Err(NnError::CorruptedState { layer, channel: c });
        }
        if !(self.epsilon > 0.0) {
            return Err(NnError::InvalidModel(format!("layer {layer}: epsilon must be > 0")));
        }
        Ok(())
    }

    pub(crate) fn to_engine(&self) -> NormWeights {
        let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect();
        NormWeights {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
            running_mean: f(&self.running_mean),
            running_var: f(&self.running_var),
            eps: self.epsilon as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Affine { weight: Tensor, bias: Option<Tensor> },
    BatchNorm(BnStats),
    None,
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Post-layer outputs for every traced layer id.
    pub activations: BTreeMap<usize, Tensor>,
    /// Batch moments seen by each BatchNorm layer (Train and Calibrate only).
    pub moments: Vec<BatchMoments>,
}

/// A sequential network together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams>,
}

impl Model {
    pub fn new(layers: Vec<LayerSpec>, params: Vec<LayerParams>) -> Result<Self, NnError> {
        let model = Self { layers, params };
        model.validate()?;
        Ok(model)
    }

    /// Fresh model with He-normal weights, zero biases and identity BatchNorm.
    pub fn init(layers: Vec<LayerSpec>, seed: u64) -> Result<Self, NnError> {
        let mut params = Vec::with_capacity(layers.len());
        for (idx, layer) in layers.iter().enumerate() {
            layer.validate_hyper().map_err(|m| NnError::InvalidModel(format!("layer {idx}: {m}")))?;
            let p = match *layer {
                LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } => {
                    let shape = layer.weight_shape().expect("analog layer");
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let mut r = rng::stream(seed, StreamPurpose::Init, idx as u64);
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng::gaussian(&mut r, 0.0, std) as f32).collect();
                    LayerParams::Affine {
                        weight: Tensor::from_vec(&shape, data)?,
                        bias: layer.bias_len().map(|b| Tensor::zeros(&[b])).transpose()?,
                    }
                }
                LayerSpec::BatchNorm2d { channels, epsilon } => LayerParams::BatchNorm(BnStats::new(channels, epsilon)),
                _ => LayerParams::None,
            };
            params.push(p);
        }
        Self::new(layers, params)
    }

    /// The reference desk-scale CNN: three Conv-BN-ReLU stages (the first two
    /// followed by 2x2 max pooling), global average pooling and a linear head.
    pub fn reference_layers(in_channels: usize, num_classes: usize) -> Vec<LayerSpec> {
        let conv = |i, o| LayerSpec::Conv2d { in_ch: i, out_ch: o, kernel: 3, stride: 1, padding: 1, has_bias: false };
        let bn = |c| LayerSpec::BatchNorm2d { channels: c, epsilon: DEFAULT_EPSILON };
        let pool = LayerSpec::MaxPool2d { kernel: 2, stride: 2 };
        vec![
            conv(in_channels, 16),
            bn(16),
            LayerSpec::Relu,
            pool,
            conv(16, 32),
            bn(32),
            LayerSpec::Relu,
            pool,
            conv(32, 32),
            bn(32),
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Flatten,
            LayerSpec::Linear { in_dim: 32, out_dim: num_classes, has_bias: true },
        ]
    }

    pub fn reference_cnn(in_channels: usize, num_classes: usize, seed: u64) -> Result<Self, NnError> {
        Self::init(Self::reference_layers(in_channels, num_classes), seed)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match *l {
            LayerSpec::Linear { out_dim, .. } => Some(out_dim),
            LayerSpec::Conv2d { out_ch, .. } => Some(out_ch),
            _ => None,
        })
    }

    pub fn analog_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_analog()).collect()
    }

    pub fn bn_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_batchnorm()).collect()
    }

    pub fn bn_stats(&self, layer: usize) -> Option<&BnStats> {
        match self.params.get(layer) {
            Some(LayerParams::BatchNorm(s)) => Some(s),
            _ => None,
        }
    }

    pub fn bn_stats_mut(&mut self, layer: usize) -> Option<&mut BnStats> {
        match self.params.get_mut(layer) {
            Some(LayerParams::BatchNorm(s)) => Some(s),
            _ => None,
        }
    }

    pub fn weight(&self, layer: usize) -> Option<&Tensor> {
        match self.params.get(layer) {
            Some(LayerParams::Affine { weight, .. }) => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self, layer: usize) -> Option<&Tensor> {
        match self.params.get(layer) {
            Some(LayerParams::Affine { bias, .. }) => bias.as_ref(),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self, layer: usize) -> Option<&mut [f32]> {
        match self.params.get_mut(layer) {
            Some(LayerParams::Affine { weight, .. }) => Some(weight.data_mut()),
            _ => None,
        }
    }

    pub fn bias_mut(&mut self, layer: usize) -> Option<&mut [f32]> {
        match self.params.get_mut(layer) {
            Some(LayerParams::Affine { bias: Some(b), .. }) => Some(b.data_mut()),
            _ => None,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params
            .iter()
            .map(|p| match p {
                LayerParams::Affine { weight, bias } => weight.len() + bias.as_ref().map_or(0, |b| b.len()),
                LayerParams::BatchNorm(s) => 2 * s.channels(),
                LayerParams::None => 0,
            })
            .sum()
    }

    /// Checks parameter shapes and the channel chaining between layers.
    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::InvalidModel("model has no layers".into()));
        }
        if self.layers.len() != self.params.len() {
            return Err(NnError::InvalidModel(format!(
                "{} layers but {} parameter entries",
                self.layers.len(),
                self.params.len()
            )));
        }
        for (idx, (layer, p)) in self.layers.iter().zip(&self.params).enumerate() {
            layer.validate_hyper().map_err(|m| NnError::InvalidModel(format!("layer {idx}: {m}")))?;
            match (layer, p) {
                (LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. }, LayerParams::Affine { weight, bias }) => {
                    let want = layer.weight_shape().expect("analog layer");
                    if weight.shape() != want.as_slice() {
                        return Err(NnError::InvalidModel(format!(
                            "layer {idx}: weight shape {:?}, expected {want:?}",
                            weight.shape()
                        )));
                    }
                    match (layer.bias_len(), bias) {
                        (None, None) => {}
                        (Some(n), Some(b)) if b.shape() == [n] => {}
                        _ => return Err(NnError::InvalidModel(format!("layer {idx}: bias does not match has_bias"))),
                    }
                }
                (LayerSpec::BatchNorm2d { channels, .. }, LayerParams::BatchNorm(s)) => s.check(idx, *channels)?,
                (l, LayerParams::None) if !l.is_analog() && !l.is_batchnorm() => {}
                (l, _) => {
                    return Err(NnError::InvalidModel(format!("layer {idx}: parameters do not match {}", l.name())));
                }
            }
        }
        self.check_chaining()
    }

    fn check_chaining(&self) -> Result<(), NnError> {
        #[derive(Clone, Copy)]
        enum Sym {
            Unknown,
            Map { ch: usize, unit: bool },
            Flat(Option<usize>),
        }
        let err = |idx: usize, l: &LayerSpec, m: String| NnError::Shape { layer: idx, kind: l.name(), message: m };
        let mut cur = Sym::Unknown;
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match (*layer, cur) {
                (LayerSpec::Conv2d { in_ch, .. }, Sym::Map { ch, .. }) if ch != in_ch => {
                    return Err(err(idx, layer, format!("expects {in_ch} channels, previous layer gives {ch}")));
                }
                (LayerSpec::Conv2d { .. }, Sym::Flat(_)) => {
                    return Err(err(idx, layer, "convolution after flatten".into()));
                }
                (LayerSpec::Conv2d { out_ch, .. }, _) => Sym::Map { ch: out_ch, unit: false },
                (LayerSpec::Linear { in_dim, .. }, Sym::Flat(Some(d))) if d != in_dim => {
                    return Err(err(idx, layer, format!("expects {in_dim} features, previous layer gives {d}")));
                }
                (LayerSpec::Linear { .. }, Sym::Map { .. }) => {
                    return Err(err(idx, layer, "linear layer on a feature map; insert Flatten".into()));
                }
                (LayerSpec::Linear { out_dim, .. }, _) => Sym::Flat(Some(out_dim)),
                (LayerSpec::BatchNorm2d { channels, .. }, Sym::Map { ch, .. } | Sym::Flat(Some(ch))) if ch != channels => {
                    return Err(err(idx, layer, format!("expects {channels} channels, previous layer gives {ch}")));
                }
                (LayerSpec::BatchNorm2d { .. } | LayerSpec::Relu, s) => s,
                (LayerSpec::MaxPool2d { .. }, Sym::Flat(_)) | (LayerSpec::GlobalAvgPool, Sym::Flat(_)) => {
                    return Err(err(idx, layer, "spatial pooling after flatten".into()));
                }
                (LayerSpec::MaxPool2d { .. }, s) => s,
                (LayerSpec::GlobalAvgPool, Sym::Map { ch, .. }) => Sym::Map { ch, unit: true },
                (LayerSpec::GlobalAvgPool, s) => s,
                (LayerSpec::Flatten, Sym::Map { ch, unit: true }) => Sym::Flat(Some(ch)),
                (LayerSpec::Flatten, Sym::Flat(d)) => Sym::Flat(d),
                (LayerSpec::Flatten, _) => Sym::Flat(None),
            };
        }
        Ok(())
    }

    /// Parameters in engine form, converted to `T`.
    pub fn engine_weights<T: Scalar>(&self) -> Vec<LayerWeights<T>> {
        let conv = |t: &Tensor| t.data().iter().map(|&v| T::from_f64(v as f64)).collect::<Vec<T>>();
        self.params
            .iter()
            .map(|p| match p {
                LayerParams::Affine { weight, bias } => LayerWeights::Affine {
                    weight: conv(weight),
                    bias: bias.as_ref().map(conv),
                },
                LayerParams::BatchNorm(s) => LayerWeights::Norm(s.to_engine()),
                LayerParams::None => LayerWeights::None,
            })
            .collect()
    }

    /// Weights as deployed for one batch: the noisy realization when a device
    /// draw is supplied, the digital master copy otherwise.
    pub(crate) fn deployed_weights(&self, noise: Option<NoiseDraw<'_>>) -> Result<Vec<LayerWeights<f32>>, NnError> {
        let mut w = self.engine_weights::<f32>();
        if let Some(draw) = noise {
            draw.device.apply(&mut w, draw.batch_index).map_err(NnError::InvalidModel)?;
        }
        Ok(w)
    }

    fn check_batch(&self, batch: &Tensor, mode: ExecMode) -> Result<(), NnError> {
        if !matches!(batch.rank(), 2 | 4) {
            return Err(NnError::Shape {
                layer: 0,
                kind: self.layers[0].name(),
                message: format!("batch must be [N, C, H, W] or [N, D], got {:?}", batch.shape()),
            });
        }
        if mode != ExecMode::Eval && batch.shape()[0] < 2 {
            return Err(NnError::InsufficientBatch { layer: 0, values_per_channel: batch.shape()[0] });
        }
        Ok(())
    }

    /// Runs the network on one batch. Eval and Calibrate never mutate the
    /// model; see [`Model::forward_train`] for the training-mode EMA.
    pub fn forward(
        &self,
        noise: Option<NoiseDraw<'_>>,
        batch: &Tensor,
        mode: ExecMode,
        trace: &[usize],
    ) -> Result<ForwardOutput, NnError> {
        self.check_batch(batch, mode)?;
        let weights = self.deployed_weights(noise)?;
        let out = engine::run(&self.layers, &weights, batch.data().to_vec(), batch.shape(), mode, trace, false)?;
        let mut activations = BTreeMap::new();
        for (idx, (shape, data)) in out.traced {
            activations.insert(idx, Tensor::from_vec(&shape, data)?);
        }
        Ok(ForwardOutput { logits: Tensor::from_vec(&out.shape, out.output)?, activations, moments: out.moments })
    }

    /// Train-mode forward: normalizes with batch statistics and folds them
    /// into the running statistics with the training momentum.
    pub fn forward_train(
        &mut self,
        noise: Option<NoiseDraw<'_>>,
        batch: &Tensor,
        trace: &[usize],
    ) -> Result<ForwardOutput, NnError> {
        let out = self.forward(noise, batch, ExecMode::Train, trace)?;
        self.absorb_train_moments(&out.moments);
        Ok(out)
    }

    pub(crate) fn absorb_train_moments(&mut self, moments: &[BatchMoments]) {
        for m in moments {
            if let Some(s) = self.bn_stats_mut(m.layer) {
                s.update_running(&m.mean, &m.var);
            }
        }
    }
}

/// Output of a standalone BatchNorm application.
#[derive(Debug, Clone)]
pub struct BnForward {
    pub output: Tensor,
    /// Batch moments in Train and Calibrate mode.
    pub batch_moments: Option<(Vec<f64>, Vec<f64>)>,
}

/// Applies BatchNorm to `[N, C, H, W]` (or `[N, C]`) data.
///
/// Train mode also updates the running statistics with the training momentum.
/// Calibrate mode leaves `stats` untouched and reports the batch moments; the
/// calibration module owns that update rule.
pub fn batchnorm_forward(x: &Tensor, stats: &mut BnStats, mode: ExecMode) -> Result<BnForward, NnError> {
    let layer = LayerSpec::BatchNorm2d { channels: stats.channels(), epsilon: stats.epsilon };
    stats.check(0, stats.channels())?;
    let weights = [LayerWeights::<f32>::Norm(stats.to_engine())];
    let out = engine::run(&[layer], &weights, x.data().to_vec(), x.shape(), mode, &[], false)?;
    let batch_moments = out.moments.into_iter().next().map(|m| (m.mean, m.var));
    if mode == ExecMode::Train {
        if let Some((m, v)) = &batch_moments {
            stats.update_running(m, v);
        }
    }
    Ok(BnForward { output: Tensor::from_vec(&out.shape, out.output)?, batch_moments })
}
