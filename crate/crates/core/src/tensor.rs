//! Dense row-major `f32` tensors.
//!
//! Storage is single precision; every reduction (matmul, moments) accumulates
//! in `f64` and rounds once at the end.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}: shape must be non-empty with every dimension >= 1")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("reduction over zero elements")]
    EmptyReduction,
}

/// Elementwise binary operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
}

impl ElemOp {
    #[inline]
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            ElemOp::Add => a + b,
            ElemOp::Sub => a - b,
            ElemOp::Mul => a * b,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self, TensorError> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the flat buffer. The length cannot change, so the
    /// shape invariant is preserved.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::from_vec(shape, self.data)
    }

    pub fn elementwise(&self, other: &Tensor, op: ElemOp) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| op.apply(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(other, ElemOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(other, ElemOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.elementwise(other, ElemOp::Mul)
    }

    /// `[m,k] x [k,n] -> [m,n]` with `f64` accumulation.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: self.shape.clone(),
            right: other.shape.clone(),
        };
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(mismatch());
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let rhs: Vec<f64> = other.data.iter().map(|&v| v as f64).collect();
        let mut out = Vec::with_capacity(m * n);
        let mut acc = vec![0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for p in 0..k {
                let a = self.data[i * k + p] as f64;
                let row = &rhs[p * n..(p + 1) * n];
                for (dst, &b) in acc.iter_mut().zip(row) {
                    *dst += a * b;
                }
            }
            out.extend(acc.iter().map(|&v| v as f32));
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Population mean and variance over `axes`.
    ///
    /// The result keeps the non-reduced axes in their original order; reducing
    /// over every axis yields shape `[1]`.
    pub fn moments(&self, axes: &[usize]) -> Result<(Tensor, Tensor), TensorError> {
        let rank = self.rank();
        let mut reduce = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(TensorError::InvalidAxis { axis, rank });
            }
            reduce[axis] = true;
        }
        if !reduce.iter().any(|&r| r) {
            return Err(TensorError::EmptyReduction);
        }
        let kept: Vec<usize> = (0..rank).filter(|&a| !reduce[a]).collect();
        let out_shape: Vec<usize> = if kept.is_empty() {
            vec![1]
        } else {
            kept.iter().map(|&a| self.shape[a]).collect()
        };
        let out_len: usize = out_shape.iter().product();
        let count = self.len() / out_len;

        // Row-major strides of the kept axes inside the output.
        let mut out_stride = vec![0usize; rank];
        let mut s = 1;
        for &a in kept.iter().rev() {
            out_stride[a] = s;
            s *= self.shape[a];
        }

        let mut sum = vec![0f64; out_len];
        let mut idx = vec![0usize; rank];
        let mut targets = Vec::with_capacity(self.len());
        for &v in &self.data {
            let o: usize = idx.iter().zip(&out_stride).map(|(i, st)| i * st).sum();
            sum[o] += v as f64;
            targets.push(o);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0f64; out_len];
        for (&v, &o) in self.data.iter().zip(&targets) {
            let d = v as f64 - mean[o];
            sq[o] += d * d;
        }
        let var = sq.iter().map(|s| (s / count as f64) as f32).collect();
        Ok((
            Tensor {
                shape: out_shape.clone(),
                data: mean.iter().map(|&m| m as f32).collect(),
            },
            Tensor {
                shape: out_shape,
                data: var,
            },
        ))
    }

    /// Copy of rows `start..end` along axis 0.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor, TensorError> {
        let rows = self.shape[0];
        if start >= end || end > rows {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                left: self.shape.clone(),
                right: vec![start, end],
            });
        }
        let row_len = self.len() / rows;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * row_len..end * row_len].to_vec(),
        })
    }

    /// Gather rows along axis 0 in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor, TensorError> {
        let n = self.shape[0];
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                left: self.shape.clone(),
                right: rows.to_vec(),
            });
        }
        let row_len = self.len() / n;
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&self.data[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    /// Concatenate along axis 0.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyReduction)?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let head = &self.data[..self.data.len().min(SHOWN)];
        if self.data.len() > SHOWN {
            write!(f, " {head:?}...")
        } else {
            write!(f, " {head:?}")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn zeros_shapes() {
        assert_eq!(Tensor::zeros(&[2, 2]).unwrap().data(), &[0.0; 4]);
        assert_eq!(Tensor::zeros(&[1]).unwrap().data(), &[0.0]);
        let z = Tensor::zeros(&[3, 1, 2]).unwrap();
        assert_eq!(z.len(), 6);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeros_rejects_bad_shapes() {
        assert!(matches!(Tensor::zeros(&[]), Err(TensorError::InvalidShape(_))));
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(TensorError::InvalidShape(_))));
        assert!(matches!(
            Tensor::from_vec(&[2], vec![1.0]),
            Err(TensorError::DataLength { .. })
        ));
    }

    #[test]
    fn elementwise_examples() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let c = t(&[2], &[1.0, -2.0]);
        let d = t(&[2], &[0.0, 5.0]);
        assert_eq!(c.mul(&d).unwrap().data(), &[0.0, -10.0]);
        assert!(matches!(
            a.add(&t(&[1, 2], &[1.0, 2.0])),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(id.matmul(&m).unwrap(), m);
        let row = t(&[1, 2], &[1.0, 2.0]);
        let col = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
        assert!(row.matmul(&row).is_err());
    }

    #[test]
    fn moments_examples() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let (m, v) = x.moments(&[0]).unwrap();
        assert_eq!(m.shape(), &[1]);
        assert!((m.data()[0] - 2.0).abs() < 1e-7);
        assert!((v.data()[0] - 2.0 / 3.0).abs() < 1e-7);

        let c = Tensor::full(&[4, 5], 3.25).unwrap();
        let (_, v) = c.moments(&[0, 1]).unwrap();
        assert_eq!(v.data()[0], 0.0);

        let b = t(&[2, 3], &[1.0, 5.0, -2.0, 0.5, 7.0, 3.0]);
        let bb = Tensor::concat_rows(&[&b, &b]).unwrap();
        assert_eq!(b.moments(&[0]).unwrap(), bb.moments(&[0]).unwrap());
    }

    #[test]
    fn moments_keeps_channel_axis() {
        // [N=2, C=2, L=2]
        let x = t(&[2, 2, 2], &[1.0, 3.0, 10.0, 10.0, 5.0, 7.0, 20.0, 40.0]);
        let (m, v) = x.moments(&[0, 2]).unwrap();
        assert_eq!(m.shape(), &[2]);
        assert_eq!(m.data(), &[4.0, 20.0]);
        assert_eq!(v.data(), &[5.0, 150.0]);
        assert!(matches!(x.moments(&[3]), Err(TensorError::InvalidAxis { .. })));
        assert!(matches!(x.moments(&[]), Err(TensorError::EmptyReduction)));
    }

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn sub_self_is_zero(v in prop::collection::vec(-1e6f32..1e6, 1..64)) {
            let x = t(&[v.len()], &v);
            prop_assert!(x.sub(&x).unwrap().data().iter().all(|&d| d == 0.0));
        }

        #[test]
        fn matmul_matches_triple_loop(
            (m, k, n, a, b) in (1usize..=32, 1usize..=32, 1usize..=32).prop_flat_map(|(m, k, n)| (
                Just(m), Just(k), Just(n),
                prop::collection::vec(-1f32..1.0, m * k),
                prop::collection::vec(-1f32..1.0, k * n),
            ))
        ) {
            let out = t(&[m, k], &a).matmul(&t(&[k, n], &b)).unwrap();
            let oracle = naive_matmul(&a, &b, m, k, n);
            for (got, want) in out.data().iter().zip(&oracle) {
                let scale = want.abs().max(1e-3);
                prop_assert!((*got as f64 - want).abs() / scale <= 1e-6);
            }
        }

        #[test]
        fn variance_identity(v in prop::collection::vec(-3f32..3.0, 1..200)) {
            let x = t(&[v.len()], &v);
            let (m, var) = x.moments(&[0]).unwrap();
            let mean_sq = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>() / v.len() as f64;
            let mean = m.data()[0] as f64;
            prop_assert!(var.data()[0] >= 0.0);
            prop_assert!((var.data()[0] as f64 - (mean_sq - mean * mean)).abs() <= 1e-5);
        }
    }

    #[test]
    fn matmul_random_5x7x3() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f32> = (0..35).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..21).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = t(&[5, 7], &a).matmul(&t(&[7, 3], &b)).unwrap();
        for (got, want) in out.data().iter().zip(naive_matmul(&a, &b, 5, 7, 3)) {
            assert!((*got as f64 - want).abs() <= 1e-6 * want.abs().max(1e-3));
        }
    }
}
