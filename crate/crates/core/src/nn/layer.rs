use std::fmt;

/// One stage of a sequential network.
///
/// Conv2d and Linear are the analog layers: on a simulated device their
/// weights are replaced by noisy realizations. Everything else runs digitally.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    },
    Linear {
        in_dim: usize,
        out_dim: usize,
        has_bias: bool,
    },
    BatchNorm2d {
        channels: usize,
        epsilon: f32,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
}

impl LayerSpec {
    pub fn is_analog(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. })
    }

    pub fn is_batchnorm(&self) -> bool {
        matches!(self, LayerSpec::BatchNorm2d { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "Conv2d",
            LayerSpec::Linear { .. } => "Linear",
            LayerSpec::BatchNorm2d { .. } => "BatchNorm2d",
            LayerSpec::Relu => "ReLU",
            LayerSpec::MaxPool2d { .. } => "MaxPool2d",
            LayerSpec::GlobalAvgPool => "GlobalAvgPool",
            LayerSpec::Flatten => "Flatten",
        }
    }

    /// Shape of the weight tensor, if the layer has one.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => Some(vec![out_ch, in_ch, kernel, kernel]),
            LayerSpec::Linear { in_dim, out_dim, .. } => Some(vec![out_dim, in_dim]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv2d { out_ch, has_bias: true, .. } => Some(out_ch),
            LayerSpec::Linear { out_dim, has_bias: true, .. } => Some(out_dim),
            _ => None,
        }
    }

    /// Output shape (including the batch axis) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, .. } => {
                let [n, c, h, w] = four(input)?;
                if c != in_ch {
                    return Err(format!("expected {in_ch} input channels, got {c}"));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(format!("kernel {kernel} larger than padded input {h}x{w}"));
                }
                Ok(vec![n, out_ch, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1])
            }
            LayerSpec::Linear { in_dim, out_dim, .. } => {
                if input.len() != 2 || input[1] != in_dim {
                    return Err(format!("expected [N, {in_dim}] input, got {input:?}"));
                }
                Ok(vec![input[0], out_dim])
            }
            LayerSpec::BatchNorm2d { channels, .. } => {
                if (input.len() != 4 && input.len() != 2) || input[1] != channels {
                    return Err(format!("expected {channels} channels, got shape {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { kernel, stride } => {
                let [n, c, h, w] = four(input)?;
                if h < kernel || w < kernel {
                    return Err(format!("pool kernel {kernel} larger than input {h}x{w}"));
                }
                Ok(vec![n, c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::GlobalAvgPool => {
                let [n, c, _, _] = four(input)?;
                Ok(vec![n, c, 1, 1])
            }
            LayerSpec::Flatten => {
                if input.len() < 2 {
                    return Err(format!("cannot flatten shape {input:?}"));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
        }
    }

    pub(crate) fn validate_hyper(&self) -> Result<(), String> {
        let positive = |name: &str, v: usize| if v == 0 { Err(format!("{name} must be >= 1")) } else { Ok(()) };
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, .. } => {
                positive("in_ch", in_ch)?;
                positive("out_ch", out_ch)?;
                positive("kernel", kernel)?;
                positive("stride", stride)
            }
            LayerSpec::Linear { in_dim, out_dim, .. } => {
                positive("in_dim", in_dim)?;
                positive("out_dim", out_dim)
            }
            LayerSpec::BatchNorm2d { channels, epsilon } => {
                positive("channels", channels)?;
                if !(epsilon > 0.0 && epsilon.is_finite()) {
                    return Err(format!("epsilon must be > 0, got {epsilon}"));
                }
                Ok(())
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                positive("kernel", kernel)?;
                positive("stride", stride)
            }
            LayerSpec::Relu | LayerSpec::GlobalAvgPool | LayerSpec::Flatten => Ok(()),
        }
    }
}

fn four(shape: &[usize]) -> Result<[usize; 4], String> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(format!("expected [N, C, H, W] input, got {shape:?}")),
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, has_bias } => write!(
                f,
                "Conv2d({in_ch}->{out_ch}, k={kernel}, s={stride}, p={padding}, bias={has_bias})"
            ),
            LayerSpec::Linear { in_dim, out_dim, has_bias } => write!(f, "Linear({in_dim}->{out_dim}, bias={has_bias})"),
            LayerSpec::BatchNorm2d { channels, epsilon } => write!(f, "BatchNorm2d({channels}, eps={epsilon:e})"),
            LayerSpec::MaxPool2d { kernel, stride } => write!(f, "MaxPool2d(k={kernel}, s={stride})"),
            other => f.write_str(other.name()),
        }
    }
}
