//! Dense row-major tensors and the elementary neural ops built on them.
//!
//! All values are immutable after construction and guaranteed finite; every
//! reduction runs in a fixed left-to-right order so outputs are bit-identical
//! for identical inputs.

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

/// Dense n-dimensional real array with shape metadata.
///
/// `dtype` records the storage width used when the tensor is written to (or
/// was read from) a CMVT file; in-memory arithmetic always happens in the
/// scalar type `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    dtype: DType,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor, validating the shape/data length contract and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().try_fold(1usize, |acc, &e| {
            acc.checked_mul(e).ok_or_else(|| {
                Error::InvalidShape(format!("shape {shape:?} overflows element count"))
            })
        })?;
        if expected != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite value at flat index {idx}"
            )));
        }
        Ok(Tensor {
            shape,
            data,
            dtype: F::DTYPE,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().try_fold(1usize, |acc, &e| {
            acc.checked_mul(e)
                .ok_or_else(|| Error::InvalidShape(format!("shape {shape:?} overflows")))
        })?;
        Ok(Tensor {
            shape,
            data: vec![F::zero(); n],
            dtype: F::DTYPE,
        })
    }

    /// Square identity matrix of side `n`.
    pub fn identity(n: usize) -> Self {
        let mut data = vec![F::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = F::one();
        }
        Tensor {
            shape: vec![n, n],
            data,
            dtype: F::DTYPE,
        }
    }

    /// 2-D tensor from explicit rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidShape("from_rows: no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape("from_rows: ragged rows".into()));
        }
        let data: Vec<F> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
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

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Retags the storage dtype without touching values.
    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    fn require_2d(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::InvalidShape(format!(
                "{op}: expected a 2-D tensor, got shape {other:?}"
            ))),
        }
    }

    /// Row count of a 2-D tensor; panics on other ranks (internal use only
    /// after shape validation).
    pub fn nrows(&self) -> usize {
        self.shape[0]
    }

    pub fn ncols(&self) -> usize {
        self.shape[1]
    }

    /// Element (i, j) of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.shape[1] + j]
    }

    /// Row `i` of a 2-D tensor as a contiguous slice.
    pub fn row(&self, i: usize) -> &[F] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Result<Tensor<F>> {
        let (r, c) = self.require_2d("transpose")?;
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
            dtype: self.dtype,
        })
    }

    /// Standard matrix product with deterministic left-to-right summation
    /// over the inner dimension.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k) = self.require_2d("matmul lhs")?;
        let (k2, n) = other.require_2d("matmul rhs")?;
        if k != k2 {
            return Err(Error::InvalidShape(format!(
                "matmul: inner dimensions disagree ({m}x{k} vs {k2}x{n})"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let lhs_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let mut acc = F::zero();
                for (p, &l) in lhs_row.iter().enumerate() {
                    acc = acc + l * other.data[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.shape != other.shape {
            return Err(Error::InvalidShape(format!(
                "add: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.shape != other.shape {
            return Err(Error::InvalidShape(format!(
                "sub: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, factor: F) -> Result<Tensor<F>> {
        let data = self.data.iter().map(|&a| a * factor).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn frobenius_norm(&self) -> F {
        let mut acc = F::zero();
        for &v in &self.data {
            acc = acc + v * v;
        }
        acc.sqrt()
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<F>) -> Result<F> {
        if self.shape != other.shape {
            return Err(Error::InvalidShape(format!(
                "max_abs_diff: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut worst = F::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let d = (a - b).abs();
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }

    /// Per-row normalization to mean 0 and variance 1 (population variance,
    /// regularized by `epsilon`); no learned affine.
    pub fn layer_norm(&self, epsilon: F) -> Result<Tensor<F>> {
        let (t, d) = self.require_2d("layer_norm")?;
        if t == 0 || d == 0 {
            return Err(Error::InvalidShape(format!(
                "layer_norm: empty tensor ({t}x{d})"
            )));
        }
        if epsilon <= F::zero() {
            return Err(Error::InvalidValue(format!(
                "layer_norm: epsilon must be positive, got {epsilon}"
            )));
        }
        let nd = F::cast(d as f64);
        let mut out = vec![F::zero(); t * d];
        for i in 0..t {
            let row = &self.data[i * d..(i + 1) * d];
            let mut sum = F::zero();
            for &v in row {
                sum = sum + v;
            }
            let mean = sum / nd;
            let mut var_acc = F::zero();
            for &v in row {
                let dlt = v - mean;
                var_acc = var_acc + dlt * dlt;
            }
            let inv = (var_acc / nd + epsilon).sqrt().recip();
            for (j, &v) in row.iter().enumerate() {
                out[i * d + j] = (v - mean) * inv;
            }
        }
        Tensor::new(vec![t, d], out)
    }
}

/// Numerically stable softmax (max-subtraction); output is positive and sums
/// to 1 within rounding.
pub fn softmax<F: Scalar>(v: &[F]) -> Result<Vec<F>> {
    if v.is_empty() {
        return Err(Error::InvalidShape("softmax: empty vector".into()));
    }
    if let Some(idx) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "softmax: non-finite logit at index {idx}"
        )));
    }
    let mut max = v[0];
    for &x in &v[1..] {
        if x > max {
            max = x;
        }
    }
    let mut exps: Vec<F> = Vec::with_capacity(v.len());
    let mut sum = F::zero();
    for &x in v {
        let e = (x - max).exp();
        exps.push(e);
        sum = sum + e;
    }
    for e in &mut exps {
        *e = *e / sum;
    }
    Ok(exps)
}
