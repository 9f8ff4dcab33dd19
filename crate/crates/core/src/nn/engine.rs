//! Sequential execution over flat buffers, shared by inference, calibration,
//! training and the `f64` gradient-check path.

use std::collections::BTreeMap;

use super::layer::LayerSpec;
use super::ops::{self, ConvGeometry};
use super::{ExecMode, NnError};
use crate::scalar::Scalar;

/// Parameters of one layer as seen by the engine. BatchNorm parameters are
/// always held in `f64`; they are applied in `f64` regardless of `T`.
#[derive(Debug, Clone)]
pub enum LayerWeights<T> {
    Affine { weight: Vec<T>, bias: Option<Vec<T>> },
    Norm(NormWeights),
    None,
}

#[derive(Debug, Clone)]
pub struct NormWeights {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

/// Per-channel batch moments observed at one BatchNorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum LayerCache<T> {
    Input(Vec<T>),
    Pool { argmax: Vec<usize>, input_len: usize },
    Norm { xhat: Vec<T>, inv_std: Vec<f64>, batch_stats: bool },
    ShapeOnly,
}

/// Intermediates kept by a forward pass for the backward pass.
pub struct Tape<T> {
    input_shapes: Vec<Vec<usize>>,
    caches: Vec<LayerCache<T>>,
}

pub struct RunOutput<T> {
    pub output: Vec<T>,
    pub shape: Vec<usize>,
    pub traced: BTreeMap<usize, (Vec<usize>, Vec<T>)>,
    pub moments: Vec<BatchMoments>,
    pub tape: Option<Tape<T>>,
}

#[derive(Debug, Clone)]
pub enum LayerGrads<T> {
    Affine { weight: Vec<T>, bias: Option<Vec<T>> },
    Norm { gamma: Vec<T>, beta: Vec<T> },
    None,
}

fn spatial(shape: &[usize]) -> (usize, usize, usize, usize) {
    match *shape {
        [n, c, h, w] => (n, c, h, w),
        [n, c] => (n, c, 1, 1),
        _ => unreachable!("shape validated before dispatch"),
    }
}

pub fn run<T: Scalar>(
    layers: &[LayerSpec],
    weights: &[LayerWeights<T>],
    input: Vec<T>,
    input_shape: &[usize],
    mode: ExecMode,
    trace: &[usize],
    keep_tape: bool,
) -> Result<RunOutput<T>, NnError> {
    let mut x = input;
    let mut shape = input_shape.to_vec();
    let mut traced = BTreeMap::new();
    let mut moments = Vec::new();
    let mut tape = keep_tape.then(|| Tape { input_shapes: Vec::new(), caches: Vec::new() });

    for (idx, (layer, w)) in layers.iter().zip(weights).enumerate() {
        let out_shape = layer.output_shape(&shape).map_err(|message| NnError::Shape {
            layer: idx,
            kind: layer.name(),
            message,
        })?;
        let (y, cache) = match (*layer, w) {
            (LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, .. }, LayerWeights::Affine { weight, bias }) => {
                let geo = ConvGeometry { in_ch, out_ch, kernel, stride, padding, height: shape[2], width: shape[3] };
                let y = ops::conv2d_forward(&x, shape[0], &geo, weight, bias.as_deref());
                (y, LayerCache::Input(x))
            }
            (LayerSpec::Linear { in_dim, out_dim, .. }, LayerWeights::Affine { weight, bias }) => {
                let y = ops::linear_forward(&x, shape[0], in_dim, out_dim, weight, bias.as_deref());
                (y, LayerCache::Input(x))
            }
            (LayerSpec::BatchNorm2d { channels, .. }, LayerWeights::Norm(nw)) => {
                let (n, _, h, wd) = spatial(&shape);
                let area = h * wd;
                let batch_stats = matches!(mode, ExecMode::Train | ExecMode::Calibrate);
                let (mean, var) = if batch_stats {
                    if n * area < 2 {
                        return Err(NnError::InsufficientBatch { layer: idx, values_per_channel: n * area });
                    }
                    let (m, v) = ops::channel_moments(&x, n, channels, area);
                    moments.push(BatchMoments { layer: idx, mean: m.clone(), var: v.clone() });
                    (m, v)
                } else {
                    if let Some(c) = nw.running_var.iter().position(|&v| v < 0.0 || v.is_nan()) {
                        return Err(NnError::CorruptedState { layer: idx, channel: c });
                    }
                    (nw.running_mean.clone(), nw.running_var.clone())
                };
                let (y, xhat, inv_std) =
                    ops::batchnorm_apply(&x, n, channels, area, &mean, &var, &nw.gamma, &nw.beta, nw.eps);
                (y, LayerCache::Norm { xhat, inv_std, batch_stats })
            }
            (LayerSpec::Relu, _) => (ops::relu_forward(&x), LayerCache::Input(x)),
            (LayerSpec::MaxPool2d { kernel, stride }, _) => {
                let (n, c, h, wd) = spatial(&shape);
                let (y, argmax) = ops::maxpool_forward(&x, n * c, h, wd, kernel, stride);
                (y, LayerCache::Pool { argmax, input_len: x.len() })
            }
            (LayerSpec::GlobalAvgPool, _) => {
                let (n, c, h, wd) = spatial(&shape);
                (ops::global_avg_pool_forward(&x, n * c, h * wd), LayerCache::ShapeOnly)
            }
            (LayerSpec::Flatten, _) => (x, LayerCache::ShapeOnly),
            (spec, _) => {
                return Err(NnError::InvalidModel(format!("layer {idx} ({}) has mismatched parameters", spec.name())));
            }
        };
        if let Some(t) = tape.as_mut() {
            t.input_shapes.push(shape.clone());
            t.caches.push(cache);
        }
        if trace.contains(&idx) {
            traced.insert(idx, (out_shape.clone(), y.clone()));
        }
        x = y;
        shape = out_shape;
    }

    Ok(RunOutput { output: x, shape, traced, moments, tape })
}

/// Gradients of the loss w.r.t. every trainable parameter, given the gradient
/// at the network output. `weights` must be the ones the tape was built with.
pub fn backward<T: Scalar>(
    layers: &[LayerSpec],
    weights: &[LayerWeights<T>],
    tape: &Tape<T>,
    grad_output: Vec<T>,
) -> Vec<LayerGrads<T>> {
    let mut grads: Vec<LayerGrads<T>> = vec![LayerGrads::None; layers.len()];
    let mut g = grad_output;
    for idx in (0..layers.len()).rev() {
        let shape = &tape.input_shapes[idx];
        let need_input = idx > 0;
        match (layers[idx], &weights[idx], &tape.caches[idx]) {
            (
                LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, has_bias },
                LayerWeights::Affine { weight, .. },
                LayerCache::Input(x),
            ) => {
                let geo = ConvGeometry { in_ch, out_ch, kernel, stride, padding, height: shape[2], width: shape[3] };
                let cg = ops::conv2d_backward(x, shape[0], &geo, weight, &g, need_input);
                grads[idx] = LayerGrads::Affine { weight: cg.weight, bias: has_bias.then_some(cg.bias) };
                g = cg.input.unwrap_or_default();
            }
            (LayerSpec::Linear { in_dim, out_dim, has_bias }, LayerWeights::Affine { weight, .. }, LayerCache::Input(x)) => {
                let lg = ops::linear_backward(x, shape[0], in_dim, out_dim, weight, &g);
                grads[idx] = LayerGrads::Affine { weight: lg.weight, bias: has_bias.then_some(lg.bias) };
                g = lg.input;
            }
            (LayerSpec::BatchNorm2d { channels, .. }, LayerWeights::Norm(nw), LayerCache::Norm { xhat, inv_std, batch_stats }) => {
                let (n, _, h, w) = spatial(shape);
                let ng = ops::batchnorm_backward(xhat, &g, n, channels, h * w, &nw.gamma, inv_std, *batch_stats);
                grads[idx] = LayerGrads::Norm { gamma: ng.gamma, beta: ng.beta };
                g = ng.input;
            }
            (LayerSpec::Relu, _, LayerCache::Input(x)) => g = ops::relu_backward(x, &g),
            (LayerSpec::MaxPool2d { .. }, _, LayerCache::Pool { argmax, input_len }) => {
                g = ops::maxpool_backward(*input_len, argmax, &g);
            }
            (LayerSpec::GlobalAvgPool, _, _) => g = ops::global_avg_pool_backward(&g, shape[2] * shape[3]),
            (LayerSpec::Flatten, _, _) => {}
            _ => unreachable!("tape built from the same layers"),
        }
    }
    grads
}
