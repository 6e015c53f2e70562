//! Orthogonal layers: (semi-)orthogonal linear projections parameterized by
//! skew-symmetric matrices, built either through the Cayley transform or the
//! matrix exponential.
//!
//! Rectangular projections (`d_out != d_in`) come from one square orthogonal
//! matrix of side `max(d_out, d_in)` sliced to the first `d_out` rows and
//! `d_in` columns, which keeps them exactly semi-orthogonal instead of merely
//! penalized toward it.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::cmvt;
use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which map takes the skew parameter to the orthogonal group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrthoMethod {
    /// `Q = (I + A/2)(I - A/2)^-1`; the default (one linear solve, exactly
    /// orthogonal).
    Cayley,
    /// `Q = exp(A)` via scaling-and-squaring.
    Expm,
}

/// Projects a square matrix onto the skew-symmetric manifold: `(W - W^T)/2`.
pub fn skew_project<F: Scalar>(w: &Tensor<F>) -> Result<Tensor<F>> {
    let n = match w.shape() {
        [r, c] if r == c => *r,
        other => {
            return Err(Error::InvalidShape(format!(
                "skew_project: expected a square matrix, got shape {other:?}"
            )))
        }
    };
    let half = F::cast(0.5);
    let mut data = vec![F::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = (w.at(i, j) - w.at(j, i)) * half;
        }
    }
    Tensor::new(vec![n, n], data)
}

fn require_skew<F: Scalar>(a: &Tensor<F>, op: &str) -> Result<usize> {
    let n = match a.shape() {
        [r, c] if r == c => *r,
        other => {
            return Err(Error::InvalidShape(format!(
                "{op}: expected a square matrix, got shape {other:?}"
            )))
        }
    };
    if a.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue(format!("{op}: non-finite entry in A")));
    }
    let tol = F::cast(1e-12);
    for i in 0..n {
        for j in 0..n {
            if (a.at(i, j) + a.at(j, i)).abs() > tol {
                return Err(Error::InvalidValue(format!(
                    "{op}: matrix is not skew-symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(n)
}

/// Cayley transform of a skew-symmetric matrix: `(I + A/2)(I - A/2)^-1`,
/// evaluated by a partial-pivot LU solve of `(I - A/2)^T X^T = (I + A/2)^T`.
/// For skew A the system is never singular (eigenvalues of `I - A/2` have
/// real part 1).
pub fn cayley<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    let n = require_skew(a, "cayley")?;
    let half = F::cast(0.5);
    let eye = Tensor::<F>::identity(n);
    let mut plus = vec![F::zero(); n * n];
    let mut minus = vec![F::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let h = a.at(i, j) * half;
            plus[i * n + j] = eye.at(i, j) + h;
            minus[i * n + j] = eye.at(i, j) - h;
        }
    }
    let plus = Tensor::new(vec![n, n], plus)?;
    let minus = Tensor::new(vec![n, n], minus)?;
    // Q = plus * minus^-1  <=>  minus^T Q^T = plus^T.
    let qt = Lu::factor(&minus.transpose()?)?.solve(&plus.transpose()?)?;
    qt.transpose()
}

/// Matrix exponential of a skew-symmetric matrix via scaling-and-squaring
/// with a truncated Taylor series.
pub fn expm_skew<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    let n = require_skew(a, "expm_skew")?;
    let norm = a.frobenius_norm().as_f64();
    // Scale so the series argument has norm <= 0.5.
    let mut squarings = 0u32;
    let mut scaled_norm = norm;
    while scaled_norm > 0.5 {
        scaled_norm /= 2.0;
        squarings += 1;
        if squarings > 64 {
            return Err(Error::InvalidValue(format!(
                "expm_skew: norm {norm:.3e} needs more than 64 squarings"
            )));
        }
    }
    let scale = F::cast(0.5f64.powi(squarings as i32));
    let scaled = a.scale(scale)?;
    // Taylor series: terms of norm <= 0.5^k / k! drop below f64 resolution
    // well before k = 24.
    let mut result = Tensor::identity(n);
    let mut term = Tensor::identity(n);
    for k in 1..=24 {
        term = term.matmul(&scaled)?.scale(F::cast(1.0 / k as f64))?;
        result = result.add(&term)?;
        if term.frobenius_norm().as_f64() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.matmul(&result)?;
    }
    Ok(result)
}

#[derive(Debug, Serialize, Deserialize)]
struct OrthoSidecar {
    d_in: usize,
    d_out: usize,
    method: OrthoMethod,
}

/// A (semi-)orthogonal projection from `d_in` to `d_out` dimensions.
///
/// Immutable after construction; the materialized projection is cached with
/// single-initialization semantics, safe under concurrent readers.
#[derive(Debug)]
pub struct OrthoLayer<F: Scalar> {
    d_in: usize,
    d_out: usize,
    /// The raw unconstrained parameter, as handed in (side x side).
    raw: Tensor<F>,
    /// Skew projection of `raw`; the actual manifold parameter.
    a: Tensor<F>,
    method: OrthoMethod,
    q_cache: OnceLock<Tensor<F>>,
}

impl<F: Scalar> Clone for OrthoLayer<F> {
    fn clone(&self) -> Self {
        OrthoLayer {
            d_in: self.d_in,
            d_out: self.d_out,
            raw: self.raw.clone(),
            a: self.a.clone(),
            method: self.method,
            q_cache: OnceLock::new(),
        }
    }
}

impl<F: Scalar> OrthoLayer<F> {
    /// Builds a layer from a raw (unconstrained) square parameter of side
    /// `max(d_in, d_out)`. The parameter passes through [`skew_project`], so
    /// optimizers may store arbitrary square matrices.
    pub fn new(d_in: usize, d_out: usize, raw: Tensor<F>, method: OrthoMethod) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::InvalidShape(
                "ortho layer: d_in and d_out must be >= 1".into(),
            ));
        }
        let side = d_in.max(d_out);
        match raw.shape() {
            [r, c] if *r == side && *c == side => {}
            other => {
                return Err(Error::InvalidShape(format!(
                    "ortho layer: parameter must be {side}x{side}, got {other:?}"
                )))
            }
        }
        let a = skew_project(&raw)?;
        Ok(OrthoLayer {
            d_in,
            d_out,
            raw,
            a,
            method,
            q_cache: OnceLock::new(),
        })
    }

    /// The identity-at-zero layer (A = 0).
    pub fn zero(d_in: usize, d_out: usize, method: OrthoMethod) -> Result<Self> {
        let side = d_in.max(d_out);
        Self::new(d_in, d_out, Tensor::zeros(vec![side, side])?, method)
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn method(&self) -> OrthoMethod {
        self.method
    }

    /// The skew-symmetric parameter.
    pub fn skew(&self) -> &Tensor<F> {
        &self.a
    }

    /// The raw pre-skew parameter, as serialized.
    pub fn raw(&self) -> &Tensor<F> {
        &self.raw
    }

    fn build_q(&self) -> Result<Tensor<F>> {
        let square = match self.method {
            OrthoMethod::Cayley => cayley(&self.a)?,
            OrthoMethod::Expm => expm_skew(&self.a)?,
        };
        // Slice the first d_out rows and d_in columns.
        let mut data = vec![F::zero(); self.d_out * self.d_in];
        for i in 0..self.d_out {
            for j in 0..self.d_in {
                data[i * self.d_in + j] = square.at(i, j);
            }
        }
        Tensor::new(vec![self.d_out, self.d_in], data)
    }

    /// The materialized `d_out x d_in` projection matrix Q.
    pub fn materialize(&self) -> Result<&Tensor<F>> {
        if let Some(q) = self.q_cache.get() {
            return Ok(q);
        }
        let q = self.build_q()?;
        Ok(self.q_cache.get_or_init(|| q))
    }

    /// Applies the projection to row-vector tokens: `out = Z Q^T`.
    pub fn apply(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        let width = match z.shape() {
            [_, w] => *w,
            other => {
                return Err(Error::InvalidShape(format!(
                    "apply_ol: tokens must be 2-D, got {other:?}"
                )))
            }
        };
        if width != self.d_in {
            return Err(Error::InvalidShape(format!(
                "apply_ol: token width {width} does not match d_in {}",
                self.d_in
            )));
        }
        let q = self.materialize()?;
        z.matmul(&q.transpose()?)
    }

    /// Writes the raw parameter as CMVT plus a JSON sidecar holding the
    /// dimensions and method.
    pub fn save(&self, cmvt_path: &Path, sidecar_path: &Path) -> Result<()> {
        cmvt::write_file(&self.raw, cmvt_path)?;
        let sidecar = OrthoSidecar {
            d_in: self.d_in,
            d_out: self.d_out,
            method: self.method,
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::Format(format!("sidecar encode: {e}")))?;
        std::fs::write(sidecar_path, json)?;
        Ok(())
    }

    pub fn load(cmvt_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let raw = cmvt::read_file(cmvt_path)?;
        let text = std::fs::read_to_string(sidecar_path)?;
        let sidecar: OrthoSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("sidecar {}: {e}", sidecar_path.display())))?;
        Self::new(sidecar.d_in, sidecar.d_out, raw, sidecar.method)
    }
}

/// Seeded random skew-symmetric matrix with entries of the given scale;
/// used by tests and the gradient-check suite.
pub fn random_skew<F: Scalar>(n: usize, scale: f64, key: &[u64]) -> Result<Tensor<F>> {
    let mut data = vec![F::zero(); n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut k = key.to_vec();
            k.push(i as u64);
            k.push(j as u64);
            let v = F::cast(crate::rng::range_f64(&k, -scale, scale));
            data[i * n + j] = v;
            data[j * n + i] = -v;
        }
    }
    Tensor::new(vec![n, n], data)
}
