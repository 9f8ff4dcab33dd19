//! Layer kernels over flat row-major buffers.
//!
//! All kernels are generic over the element type and accumulate in `f64`.
//! Activations are `[N, C, H, W]` (or `[N, D]` for dense layers); conv weights
//! are `[out, in, k, k]` and linear weights `[out, in]`.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Unfold one sample into `[in*k*k, oh*ow]` columns.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let p = oh * ow;
        let k = self.kernel;
        for c in 0..self.in_ch {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.height as isize {
                            out_row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize].to_f64()
                            };
                        }
                    }
                }
            }
        }
    }

    /// Fold columns back into one sample, summing overlapping taps.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let p = oh * ow;
        let k = self.kernel;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < self.width {
                                plane[iy as usize * self.width + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    geo: &ConvGeometry,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plen = geo.patch_len();
    let p = geo.positions();
    let in_len = geo.in_ch * geo.height * geo.width;
    let w64: Vec<f64> = weight.iter().map(|v| v.to_f64()).collect();
    let mut cols = vec![0f64; plen * p];
    let mut acc = vec![0f64; p];
    let mut out = Vec::with_capacity(batch * geo.out_ch * p);
    for s in 0..batch {
        geo.im2col(&x[s * in_len..(s + 1) * in_len], &mut cols);
        for o in 0..geo.out_ch {
            let b = bias.map_or(0.0, |b| b[o].to_f64());
            acc.iter_mut().for_each(|a| *a = b);
            for (j, &wv) in w64[o * plen..(o + 1) * plen].iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                for (a, &c) in acc.iter_mut().zip(&cols[j * p..(j + 1) * p]) {
                    *a += wv * c;
                }
            }
            out.extend(acc.iter().map(|&a| T::from_f64(a)));
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    geo: &ConvGeometry,
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let plen = geo.patch_len();
    let p = geo.positions();
    let in_len = geo.in_ch * geo.height * geo.width;
    let out_len = geo.out_ch * p;
    let w64: Vec<f64> = weight.iter().map(|v| v.to_f64()).collect();
    let mut gw = vec![0f64; geo.out_ch * plen];
    let mut gb = vec![0f64; geo.out_ch];
    let mut gx = if need_input { Some(vec![0f64; batch * in_len]) } else { None };
    let mut cols = vec![0f64; plen * p];
    let mut gcols = vec![0f64; plen * p];
    let mut g = vec![0f64; out_len];
    for s in 0..batch {
        geo.im2col(&x[s * in_len..(s + 1) * in_len], &mut cols);
        for (dst, v) in g.iter_mut().zip(&grad_out[s * out_len..(s + 1) * out_len]) {
            *dst = v.to_f64();
        }
        for o in 0..geo.out_ch {
            let go = &g[o * p..(o + 1) * p];
            gb[o] += go.iter().sum::<f64>();
            let gw_row = &mut gw[o * plen..(o + 1) * plen];
            for (j, dst) in gw_row.iter_mut().enumerate() {
                let col = &cols[j * p..(j + 1) * p];
                *dst += go.iter().zip(col).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if let Some(gx) = gx.as_mut() {
            gcols.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..geo.out_ch {
                let go = &g[o * p..(o + 1) * p];
                for j in 0..plen {
                    let wv = w64[o * plen + j];
                    if wv == 0.0 {
                        continue;
                    }
                    for (dst, &gv) in gcols[j * p..(j + 1) * p].iter_mut().zip(go) {
                        *dst += wv * gv;
                    }
                }
            }
            geo.col2im(&gcols, &mut gx[s * in_len..(s + 1) * in_len]);
        }
    }
    ConvGrads {
        input: gx.map(|v| v.into_iter().map(T::from_f64).collect()),
        weight: gw.into_iter().map(T::from_f64).collect(),
        bias: gb.into_iter().map(T::from_f64).collect(),
    }
}

/// `y = x W^T + b` with `x: [n, in]`, `W: [out, in]`.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * out_dim);
    for s in 0..batch {
        let row = &x[s * in_dim..(s + 1) * in_dim];
        for o in 0..out_dim {
            let wr = &weight[o * in_dim..(o + 1) * in_dim];
            let mut acc = bias.map_or(0.0, |b| b[o].to_f64());
            for (a, b) in row.iter().zip(wr) {
                acc += a.to_f64() * b.to_f64();
            }
            out.push(T::from_f64(acc));
        }
    }
    out
}

pub struct LinearGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    weight: &[T],
    grad_out: &[T],
) -> LinearGrads<T> {
    let mut gw = vec![0f64; out_dim * in_dim];
    let mut gb = vec![0f64; out_dim];
    let mut gx = vec![0f64; batch * in_dim];
    for s in 0..batch {
        let row = &x[s * in_dim..(s + 1) * in_dim];
        for o in 0..out_dim {
            let g = grad_out[s * out_dim + o].to_f64();
            gb[o] += g;
            let wr = &weight[o * in_dim..(o + 1) * in_dim];
            let gwr = &mut gw[o * in_dim..(o + 1) * in_dim];
            let gxr = &mut gx[s * in_dim..(s + 1) * in_dim];
            for i in 0..in_dim {
                gwr[i] += g * row[i].to_f64();
                gxr[i] += g * wr[i].to_f64();
            }
        }
    }
    LinearGrads {
        input: gx.into_iter().map(T::from_f64).collect(),
        weight: gw.into_iter().map(T::from_f64).collect(),
        bias: gb.into_iter().map(T::from_f64).collect(),
    }
}

pub fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect()
}

pub fn relu_backward<T: Scalar>(x: &[T], grad_out: &[T]) -> Vec<T> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
        .collect()
}

/// Max pooling without padding. Returns the output and, per output element,
/// the flat input index that won (first maximum on ties).
pub fn maxpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let oh = (height - kernel) / stride + 1;
    let ow = (width - kernel) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * width + ox * stride;
                let mut best = x[best_idx];
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * width + ox * stride + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut gx = vec![T::ZERO; input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        gx[i] += g;
    }
    gx
}

pub fn global_avg_pool_forward<T: Scalar>(x: &[T], planes: usize, area: usize) -> Vec<T> {
    (0..planes)
        .map(|pl| {
            let s: f64 = x[pl * area..(pl + 1) * area].iter().map(|v| v.to_f64()).sum();
            T::from_f64(s / area as f64)
        })
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &[T], area: usize) -> Vec<T> {
    let mut gx = Vec::with_capacity(grad_out.len() * area);
    for &g in grad_out {
        let v = T::from_f64(g.to_f64() / area as f64);
        gx.extend(std::iter::repeat_n(v, area));
    }
    gx
}

/// Per-channel population moments of `[N, C, L]` data.
pub fn channel_moments<T: Scalar>(x: &[T], batch: usize, channels: usize, area: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * area) as f64;
    let mut mean = vec![0f64; channels];
    for s in 0..batch {
        for c in 0..channels {
            let base = (s * channels + c) * area;
            mean[c] += x[base..base + area].iter().map(|v| v.to_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0f64; channels];
    for s in 0..batch {
        for c in 0..channels {
            let base = (s * channels + c) * area;
            let m = mean[c];
            var[c] += x[base..base + area]
                .iter()
                .map(|v| {
                    let d = v.to_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta` per channel. Also returns the
/// normalized values and the per-channel inverse standard deviation.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_apply<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    area: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    for s in 0..batch {
        for c in 0..channels {
            let base = (s * channels + c) * area;
            for &v in &x[base..base + area] {
                let h = (v.to_f64() - mean[c]) * inv_std[c];
                xhat.push(T::from_f64(h));
                out.push(T::from_f64(h * gamma[c] + beta[c]));
            }
        }
    }
    (out, xhat, inv_std)
}

pub struct NormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward pass of batch normalization. With `batch_stats` the mean and
/// variance are functions of the input and their gradient paths are included.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward<T: Scalar>(
    xhat: &[T],
    grad_out: &[T],
    batch: usize,
    channels: usize,
    area: usize,
    gamma: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
) -> NormGrads<T> {
    let mut dgamma = vec![0f64; channels];
    let mut dbeta = vec![0f64; channels];
    for s in 0..batch {
        for c in 0..channels {
            let base = (s * channels + c) * area;
            for i in base..base + area {
                let g = grad_out[i].to_f64();
                dbeta[c] += g;
                dgamma[c] += g * xhat[i].to_f64();
            }
        }
    }
    let m = (batch * area) as f64;
    let mut dx = Vec::with_capacity(xhat.len());
    for s in 0..batch {
        for c in 0..channels {
            let base = (s * channels + c) * area;
            let scale = gamma[c] * inv_std[c];
            for i in base..base + area {
                let g = grad_out[i].to_f64();
                let v = if batch_stats {
                    scale * (g - dbeta[c] / m - xhat[i].to_f64() * dgamma[c] / m)
                } else {
                    scale * g
                };
                dx.push(T::from_f64(v));
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma.into_iter().map(T::from_f64).collect(),
        beta: dbeta.into_iter().map(T::from_f64).collect(),
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], batch: usize, classes: usize, labels: &[usize]) -> (f64, Vec<T>) {
    let mut loss = 0f64;
    let mut grad = Vec::with_capacity(logits.len());
    for s in 0..batch {
        let row: Vec<f64> = logits[s * classes..(s + 1) * classes].iter().map(|v| v.to_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[labels[s]];
        for (k, e) in exps.iter().enumerate() {
            let p = e / z;
            let t = if k == labels[s] { 1.0 } else { 0.0 };
            grad.push(T::from_f64((p - t) / batch as f64));
        }
    }
    (loss / batch as f64, grad)
}

/// Index of the largest logit per row (first on ties).
pub fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
