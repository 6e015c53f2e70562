//! Token grids: the 2-D arrangement of patch tokens a vision transformer
//! produces, with an optional class token stored at row 0.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A `rows x cols` grid of `dim`-wide tokens, stored row-major as a 2-D
/// tensor. When a class token is present it occupies row index 0 and the
/// patch tokens follow.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<F: Scalar> {
    rows: usize,
    cols: usize,
    dim: usize,
    tokens: Tensor<F>,
    class_token_present: bool,
}

impl<F: Scalar> TokenGrid<F> {
    pub fn new(
        rows: usize,
        cols: usize,
        tokens: Tensor<F>,
        class_token_present: bool,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(format!(
                "token grid: rows and cols must be >= 1, got {rows}x{cols}"
            )));
        }
        let (t, dim) = match tokens.shape() {
            [t, d] => (*t, *d),
            other => {
                return Err(Error::InvalidShape(format!(
                    "token grid: tokens must be 2-D, got shape {other:?}"
                )))
            }
        };
        if dim == 0 {
            return Err(Error::InvalidShape("token grid: dim must be >= 1".into()));
        }
        let expected = rows * cols + usize::from(class_token_present);
        if t != expected {
            return Err(Error::InvalidShape(format!(
                "token grid: {rows}x{cols} (class token: {class_token_present}) needs {expected} tokens, got {t}"
            )));
        }
        Ok(TokenGrid {
            rows,
            cols,
            dim,
            tokens,
            class_token_present,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &Tensor<F> {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor<F> {
        self.tokens
    }

    pub fn class_token_present(&self) -> bool {
        self.class_token_present
    }

    /// Total token count including the class token if present.
    pub fn token_count(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Row index of patch (r, c) inside the token tensor.
    pub fn patch_row_index(&self, r: usize, c: usize) -> usize {
        usize::from(self.class_token_present) + r * self.cols + c
    }

    /// The patch token at grid position (r, c).
    pub fn patch(&self, r: usize, c: usize) -> &[F] {
        self.tokens.row(self.patch_row_index(r, c))
    }

    /// Replaces the token tensor, keeping the geometry; widths may change.
    pub fn with_tokens(&self, tokens: Tensor<F>) -> Result<Self> {
        TokenGrid::new(self.rows, self.cols, tokens, self.class_token_present)
    }

    /// 2x2 mean pooling over the patch grid. Requires even rows and cols (no
    /// implicit padding); the class token, if present, passes through.
    pub fn pool2x2(&self) -> Result<TokenGrid<F>> {
        if self.rows % 2 != 0 || self.cols % 2 != 0 {
            return Err(Error::InvalidShape(format!(
                "pool2x2: grid {}x{} must have even rows and cols",
                self.rows, self.cols
            )));
        }
        let (out_rows, out_cols) = (self.rows / 2, self.cols / 2);
        let offset = usize::from(self.class_token_present);
        let quarter = F::cast(0.25);
        let mut data: Vec<F> = Vec::with_capacity((out_rows * out_cols + offset) * self.dim);
        if self.class_token_present {
            data.extend_from_slice(self.tokens.row(0));
        }
        for r in 0..out_rows {
            for c in 0..out_cols {
                let block = [
                    self.patch(2 * r, 2 * c),
                    self.patch(2 * r, 2 * c + 1),
                    self.patch(2 * r + 1, 2 * c),
                    self.patch(2 * r + 1, 2 * c + 1),
                ];
                for ch in 0..self.dim {
                    let sum = ((block[0][ch] + block[1][ch]) + (block[2][ch] + block[3][ch]))
                        * quarter;
                    data.push(sum);
                }
            }
        }
        let tokens = Tensor::new(vec![out_rows * out_cols + offset, self.dim], data)?;
        TokenGrid::new(out_rows, out_cols, tokens, self.class_token_present)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_from_patches(rows: usize, cols: usize, patches: &[Vec<f64>]) -> TokenGrid<f64> {
        let t = Tensor::from_rows(patches).unwrap();
        TokenGrid::new(rows, cols, t, false).unwrap()
    }

    #[test]
    fn pool_single_block_mean() {
        let g = grid_from_patches(
            2,
            2,
            &[vec![1.0, 10.0], vec![2.0, 20.0], vec![3.0, 30.0], vec![4.0, 40.0]],
        );
        let p = g.pool2x2().unwrap();
        assert_eq!(p.rows(), 1);
        assert_eq!(p.cols(), 1);
        assert_eq!(p.patch(0, 0), &[2.5, 25.0]);
    }

    #[test]
    fn pool_hand_scalar_block() {
        let g = grid_from_patches(2, 2, &[vec![0.0], vec![2.0], vec![4.0], vec![6.0]]);
        let p = g.pool2x2().unwrap();
        assert_eq!(p.patch(0, 0), &[3.0]);
    }

    #[test]
    fn pool_constant_field() {
        let token = vec![0.5, -1.5, 2.0];
        let patches: Vec<Vec<f64>> = (0..16).map(|_| token.clone()).collect();
        let g = grid_from_patches(4, 4, &patches);
        let p = g.pool2x2().unwrap();
        assert_eq!(p.rows(), 2);
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(p.patch(r, c), token.as_slice());
            }
        }
    }

    #[test]
    fn pool_rejects_odd_grid() {
        let patches: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let g = grid_from_patches(2, 3, &patches);
        assert!(g.pool2x2().is_err());
    }

    #[test]
    fn pool_passes_class_token_through() {
        let mut rows = vec![vec![9.0, 9.0]]; // class token
        rows.extend((0..4).map(|i| vec![i as f64, 2.0 * i as f64]));
        let t = Tensor::from_rows(&rows).unwrap();
        let g = TokenGrid::new(2, 2, t, true).unwrap();
        let p = g.pool2x2().unwrap();
        assert!(p.class_token_present());
        assert_eq!(p.tokens().row(0), &[9.0, 9.0]);
        assert_eq!(p.patch(0, 0), &[1.5, 3.0]);
    }

    #[test]
    fn pool_preserves_scaled_mass() {
        let patches: Vec<Vec<f64>> = (0..64)
            .map(|i| vec![crate::rng::unit_f64(&[11, i]) - 0.5])
            .collect();
        let g = grid_from_patches(8, 8, &patches);
        let p = g.pool2x2().unwrap();
        let sum_in: f64 = g.tokens().data().iter().sum();
        let sum_out: f64 = p.tokens().data().iter().sum();
        assert!((sum_out - sum_in / 4.0).abs() <= 1e-12);
    }

    #[test]
    fn grid_shape_validation() {
        let t = Tensor::<f64>::zeros(vec![4, 3]).unwrap();
        assert!(TokenGrid::new(2, 2, t.clone(), false).is_ok());
        assert!(TokenGrid::new(2, 2, t.clone(), true).is_err());
        assert!(TokenGrid::new(0, 2, t, false).is_err());
    }
}
