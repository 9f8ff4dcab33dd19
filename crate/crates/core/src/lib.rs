//! Simulation of analog processing-in-memory weight noise on small CNNs, with
//! noise-aware BatchNorm calibration, activation-shift diagnostics and a
//! trainer for the noise-injection baseline.

pub mod calibration;
pub mod data;
pub mod diagnostics;
pub mod eval;
pub mod nn;
pub mod noise;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use nn::{ExecMode, LayerSpec, Model, NnError};
pub use noise::{instantiate_device, DeviceInstance, NoiseDraw, NoiseKind, NoiseSpec};
pub use tensor::{Tensor, TensorError};
pub use calibration::{calibrate, eval_with_dynamic_calibration, CalibratedStats, CalibrationConfig};
pub use eval::{evaluate, EvalMetrics};
pub use train::{train, TrainConfig, TrainReport};
