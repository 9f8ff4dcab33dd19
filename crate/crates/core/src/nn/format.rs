//! Binary model file format (little-endian).
//!
//! ```text
//! magic "PIMN" | version u32 | layer count u32
//! per layer: kind u8, kind-specific u32 hyperparameters, then tensors
//!   tensor = rank u32, dims u32 x rank, f32 x product(dims)
//!   Conv2d    (0): in, out, kernel, stride, padding, has_bias | weight [, bias]
//!   Linear    (1): in, out, has_bias                          | weight [, bias]
//!   BatchNorm (2): channels | running_mean, running_var, gamma, beta, eps f32, momentum f32
//!   ReLU (3), MaxPool2d (4): kernel, stride, GlobalAvgPool (5), Flatten (6)
//! CRC32 (IEEE) of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::layer::LayerSpec;
use super::model::{BnStats, LayerParams, Model};
use super::NnError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PIMN";
pub const FORMAT_VERSION: u32 = 1;

const KIND_CONV: u8 = 0;
const KIND_LINEAR: u8 = 1;
const KIND_BN: u8 = 2;
const KIND_RELU: u8 = 3;
const KIND_MAXPOOL: u8 = 4;
const KIND_GAP: u8 = 5;
const KIND_FLATTEN: u8 = 6;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"PIMN\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("file truncated at byte offset {offset} (needed {needed} more bytes)")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed model file at byte offset {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("model in file is invalid: {0}")]
    InvalidModel(#[from] NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, shape: &[usize], data: &[f32]) {
        self.u32(shape.len());
        for &d in shape {
            self.u32(d);
        }
        for &v in data {
            self.f32(v);
        }
    }
}

pub fn write_model(model: &Model) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION as usize);
    w.u32(model.layers().len());
    for (layer, params) in model.layers().iter().zip(model.params()) {
        match *layer {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, has_bias } => {
                w.u8(KIND_CONV);
                for v in [in_ch, out_ch, kernel, stride, padding, has_bias as usize] {
                    w.u32(v);
                }
            }
            LayerSpec::Linear { in_dim, out_dim, has_bias } => {
                w.u8(KIND_LINEAR);
                for v in [in_dim, out_dim, has_bias as usize] {
                    w.u32(v);
                }
            }
            LayerSpec::BatchNorm2d { channels, .. } => {
                w.u8(KIND_BN);
                w.u32(channels);
            }
            LayerSpec::Relu => w.u8(KIND_RELU),
            LayerSpec::MaxPool2d { kernel, stride } => {
                w.u8(KIND_MAXPOOL);
                w.u32(kernel);
                w.u32(stride);
            }
            LayerSpec::GlobalAvgPool => w.u8(KIND_GAP),
            LayerSpec::Flatten => w.u8(KIND_FLATTEN),
        }
        match params {
            LayerParams::Affine { weight, bias } => {
                w.tensor(weight.shape(), weight.data());
                if let Some(b) = bias {
                    w.tensor(b.shape(), b.data());
                }
            }
            LayerParams::BatchNorm(s) => {
                for v in [&s.running_mean, &s.running_var, &s.gamma, &s.beta] {
                    w.tensor(&[v.len()], v);
                }
                w.f32(s.epsilon);
                w.f32(s.momentum);
            }
            LayerParams::None => {}
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let avail = self.buf.len() - self.pos;
        if avail < n {
            return Err(FormatError::Truncated { offset: self.buf.len(), needed: n - avail });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn usize(&mut self) -> Result<usize, FormatError> {
        self.u32().map(|v| v as usize)
    }
    fn flag(&mut self) -> Result<bool, FormatError> {
        let at = self.pos;
        match self.u32()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.malformed(at, format!("boolean field holds {v}"))),
        }
    }
    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn malformed(&self, offset: usize, message: String) -> FormatError {
        FormatError::Malformed { offset, message }
    }
    fn tensor(&mut self) -> Result<(Vec<usize>, Vec<f32>), FormatError> {
        let at = self.pos;
        let rank = self.usize()?;
        if rank == 0 || rank > 8 {
            return Err(self.malformed(at, format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.usize()?;
            count = count
                .checked_mul(d)
                .filter(|&c| c > 0)
                .ok_or_else(|| self.malformed(at, "tensor dimensions are zero or overflow".into()))?;
            shape.push(d);
        }
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| self.malformed(at, "tensor too large".into()))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((shape, data))
    }
    fn vector(&mut self, len: usize) -> Result<Vec<f32>, FormatError> {
        let at = self.pos;
        let (shape, data) = self.tensor()?;
        if shape != [len] {
            return Err(self.malformed(at, format!("expected vector of length {len}, got shape {shape:?}")));
        }
        Ok(data)
    }
}

fn read_body(r: &mut Reader<'_>) -> Result<(Vec<LayerSpec>, Vec<LayerParams>), FormatError> {
    let count = r.usize()?;
    let mut layers = Vec::new();
    let mut params = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let kind = r.u8()?;
        let layer = match kind {
            KIND_CONV => LayerSpec::Conv2d {
                in_ch: r.usize()?,
                out_ch: r.usize()?,
                kernel: r.usize()?,
                stride: r.usize()?,
                padding: r.usize()?,
                has_bias: r.flag()?,
            },
            KIND_LINEAR => LayerSpec::Linear { in_dim: r.usize()?, out_dim: r.usize()?, has_bias: r.flag()? },
            KIND_BN => LayerSpec::BatchNorm2d { channels: r.usize()?, epsilon: 0.0 },
            KIND_RELU => LayerSpec::Relu,
            KIND_MAXPOOL => LayerSpec::MaxPool2d { kernel: r.usize()?, stride: r.usize()? },
            KIND_GAP => LayerSpec::GlobalAvgPool,
            KIND_FLATTEN => LayerSpec::Flatten,
            other => return Err(r.malformed(at, format!("unknown layer kind {other}"))),
        };
        let (layer, p) = match layer {
            LayerSpec::Conv2d { has_bias, .. } | LayerSpec::Linear { has_bias, .. } => {
                let (ws, wd) = r.tensor()?;
                let weight = Tensor::from_vec(&ws, wd).map_err(|e| r.malformed(at, e.to_string()))?;
                let bias = if has_bias {
                    let (bs, bd) = r.tensor()?;
                    Some(Tensor::from_vec(&bs, bd).map_err(|e| r.malformed(at, e.to_string()))?)
                } else {
                    None
                };
                (layer, LayerParams::Affine { weight, bias })
            }
            LayerSpec::BatchNorm2d { channels, .. } => {
                let running_mean = r.vector(channels)?;
                let running_var = r.vector(channels)?;
                let gamma = r.vector(channels)?;
                let beta = r.vector(channels)?;
                let epsilon = r.f32()?;
                let momentum = r.f32()?;
                let stats = BnStats { running_mean, running_var, gamma, beta, epsilon, momentum };
                (LayerSpec::BatchNorm2d { channels, epsilon }, LayerParams::BatchNorm(stats))
            }
            _ => (layer, LayerParams::None),
        };
        layers.push(layer);
        params.push(p);
    }
    Ok((layers, params))
}

pub fn read_model(bytes: &[u8]) -> Result<Model, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let body = read_body(&mut r);
    let checksum = || -> Result<(), FormatError> {
        let split = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[split..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..split]);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        Ok(())
    };
    let (layers, params) = match body {
        Ok(b) => b,
        Err(e @ FormatError::Truncated { .. }) => return Err(e),
        Err(e) => {
            // A corrupted structure usually comes with a bad checksum; that is
            // the more useful report.
            if bytes.len() >= 12 {
                checksum()?;
            }
            return Err(e);
        }
    };
    let remaining = bytes.len() - r.pos;
    if remaining < 4 {
        return Err(FormatError::Truncated { offset: bytes.len(), needed: 4 - remaining });
    }
    checksum()?;
    if remaining != 4 {
        return Err(FormatError::Malformed { offset: r.pos, message: format!("{} trailing bytes", remaining - 4) });
    }
    Ok(Model::new(layers, params)?)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<(), FormatError> {
    fs::write(path, write_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model, FormatError> {
    read_model(&fs::read(path)?)
}
