//! Small dense linear algebra: partial-pivot LU factorization for the solves
//! behind the Cayley transform and its derivative. Matrices here are square
//! 2-D tensors of modest side (the connector works at d <= a few hundred).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// LU factorization with partial pivoting, stored in packed form.
pub struct Lu<F: Scalar> {
    n: usize,
    /// Combined L (unit lower, below diagonal) and U (upper including diagonal).
    lu: Vec<F>,
    /// Row permutation: `perm[i]` is the source row of factored row `i`.
    perm: Vec<usize>,
    /// Sign of the permutation, for determinants.
    perm_sign: F,
}

impl<F: Scalar> Lu<F> {
    pub fn factor(a: &Tensor<F>) -> Result<Self> {
        let n = match a.shape() {
            [r, c] if r == c => *r,
            other => {
                return Err(Error::InvalidShape(format!(
                    "lu: expected a square matrix, got shape {other:?}"
                )))
            }
        };
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut perm_sign = F::one();
        for k in 0..n {
            // Pivot: largest magnitude in column k at or below the diagonal.
            let mut pivot_row = k;
            let mut pivot_mag = lu[k * n + k].abs();
            for i in (k + 1)..n {
                let mag = lu[i * n + k].abs();
                if mag > pivot_mag {
                    pivot_mag = mag;
                    pivot_row = i;
                }
            }
            if pivot_mag == F::zero() {
                return Err(Error::InvalidValue(format!(
                    "lu: singular matrix (zero pivot at column {k})"
                )));
            }
            if pivot_row != k {
                for j in 0..n {
                    lu.swap(k * n + j, pivot_row * n + j);
                }
                perm.swap(k, pivot_row);
                perm_sign = -perm_sign;
            }
            let pivot = lu[k * n + k];
            for i in (k + 1)..n {
                let factor = lu[i * n + k] / pivot;
                lu[i * n + k] = factor;
                for j in (k + 1)..n {
                    lu[i * n + j] = lu[i * n + j] - factor * lu[k * n + j];
                }
            }
        }
        Ok(Lu {
            n,
            lu,
            perm,
            perm_sign,
        })
    }

    /// Solves `A X = B` for a matrix of right-hand sides.
    pub fn solve(&self, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (rows, cols) = match b.shape() {
            [r, c] => (*r, *c),
            other => {
                return Err(Error::InvalidShape(format!(
                    "lu solve: rhs must be 2-D, got {other:?}"
                )))
            }
        };
        if rows != self.n {
            return Err(Error::InvalidShape(format!(
                "lu solve: rhs has {rows} rows, matrix side is {}",
                self.n
            )));
        }
        let n = self.n;
        // Apply the row permutation to B.
        let mut x = vec![F::zero(); rows * cols];
        for i in 0..n {
            let src = self.perm[i];
            for j in 0..cols {
                x[i * cols + j] = b.at(src, j);
            }
        }
        // Forward substitution with unit lower factor.
        for i in 1..n {
            for k in 0..i {
                let l = self.lu[i * n + k];
                for j in 0..cols {
                    x[i * cols + j] = x[i * cols + j] - l * x[k * cols + j];
                }
            }
        }
        // Back substitution with upper factor.
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let u = self.lu[i * n + k];
                for j in 0..cols {
                    x[i * cols + j] = x[i * cols + j] - u * x[k * cols + j];
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..cols {
                x[i * cols + j] = x[i * cols + j] / d;
            }
        }
        Tensor::new(vec![rows, cols], x)
    }

    pub fn determinant(&self) -> F {
        let mut det = self.perm_sign;
        for i in 0..self.n {
            det = det * self.lu[i * self.n + i];
        }
        det
    }
}

/// Convenience wrapper: factor and solve in one call.
pub fn solve<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    Lu::factor(a)?.solve(b)
}

pub fn determinant<F: Scalar>(a: &Tensor<F>) -> Result<F> {
    Ok(Lu::factor(a)?.determinant())
}
