//! Sequential networks: layer definitions, the execution engine, BatchNorm and
//! the model file format.

pub mod engine;
pub mod format;
pub mod layer;
pub mod model;
pub mod ops;

use thiserror::Error;

pub use engine::BatchMoments;
pub use format::{load_model, read_model, save_model, write_model, FormatError, FORMAT_VERSION, MAGIC};
pub use layer::LayerSpec;
pub use model::{batchnorm_forward, BnForward, BnStats, ForwardOutput, LayerParams, Model, DEFAULT_EPSILON, TRAIN_BN_MOMENTUM};

use crate::tensor::TensorError;

/// How BatchNorm layers normalize during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Batch statistics normalize; running statistics follow the training EMA.
    Train,
    /// Running statistics normalize.
    Eval,
    /// Batch statistics normalize and are reported for calibration.
    Calibrate,
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer} ({kind}): {message}")]
    Shape {
        layer: usize,
        kind: &'static str,
        message: String,
    },
    #[error("layer {layer}: batch statistics need at least 2 values per channel, got {values_per_channel}")]
    InsufficientBatch { layer: usize, values_per_channel: usize },
    #[error("layer {layer}: running variance of channel {channel} is negative or NaN")]
    CorruptedState { layer: usize, channel: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("no cached intermediates: backward needs a forward pass recorded in train mode")]
    MissingTape,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
