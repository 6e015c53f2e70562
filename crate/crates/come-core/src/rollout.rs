//! Layer-wise attention rollout: head-mean fusion, discard-ratio pruning
//! that protects class-token links, recursive chaining of the processed
//! matrices, and class-to-patch heatmap extraction.

use std::io::Write;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-stochasticity tolerance applied when ingesting attention matrices.
pub const INGEST_ROW_SUM_TOL: f64 = 1e-6;

/// One transformer layer's self-attention, one `T x T` matrix per head, with
/// the class token at index 0. Rows are queries and must sum to 1.
#[derive(Debug, Clone)]
pub struct AttnLayer<F: Scalar> {
    heads: Vec<Tensor<F>>,
    size: usize,
}

impl<F: Scalar> AttnLayer<F> {
    pub fn new(heads: Vec<Tensor<F>>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::InvalidShape("attention layer: zero heads".into()));
        }
        let size = match heads[0].shape() {
            [r, c] if r == c => *r,
            other => {
                return Err(Error::InvalidShape(format!(
                    "attention layer: head 0 must be square, got {other:?}"
                )))
            }
        };
        let tol = F::cast(INGEST_ROW_SUM_TOL);
        for (h, head) in heads.iter().enumerate() {
            if head.shape() != [size, size] {
                return Err(Error::InvalidShape(format!(
                    "attention layer: head {h} shape {:?} != head 0 shape [{size}, {size}]",
                    head.shape()
                )));
            }
            for i in 0..size {
                let mut sum = F::zero();
                for &v in head.row(i) {
                    if v < F::zero() {
                        return Err(Error::InvalidValue(format!(
                            "attention layer: negative weight in head {h}, row {i}"
                        )));
                    }
                    sum = sum + v;
                }
                if (sum - F::one()).abs() > tol {
                    return Err(Error::InvalidValue(format!(
                        "attention layer: head {h}, row {i} sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(AttnLayer { heads, size })
    }

    /// Splits a `(heads, T, T)` tensor into one matrix per head.
    pub fn from_stacked(stacked: &Tensor<F>) -> Result<Self> {
        let (h, t) = match stacked.shape() {
            [h, r, c] if r == c && *h >= 1 => (*h, *r),
            other => {
                return Err(Error::InvalidShape(format!(
                    "attention layer: expected (heads, T, T), got {other:?}"
                )))
            }
        };
        let heads = (0..h)
            .map(|i| {
                Tensor::new(
                    vec![t, t],
                    stacked.data()[i * t * t..(i + 1) * t * t].to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(heads)
    }

    pub fn heads(&self) -> &[Tensor<F>] {
        &self.heads
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Token count T (class token included).
    pub fn size(&self) -> usize {
        self.size
    }
}

/// How a rollout is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// Process a single layer on its own.
    PerLayer,
    /// Multiply the processed matrices of layers `0..=layer_index` in order.
    Chained,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    /// Fraction of the smallest non-protected links zeroed before chaining.
    pub discard_ratio: f64,
    /// Rescale rows to sum 1 after pruning (all-zero rows become one-hot on
    /// the class column).
    pub renormalize_rows: bool,
    pub mode: RolloutMode,
    /// Mix `0.5 (A + I)` before chaining; disable to inspect the raw
    /// attention product.
    pub residual_mix: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            discard_ratio: 0.0,
            renormalize_rows: true,
            mode: RolloutMode::Chained,
            residual_mix: true,
        }
    }
}

impl RolloutConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.discard_ratio) {
            return Err(Error::InvalidValue(format!(
                "rollout: discard_ratio must be in [0, 1), got {}",
                self.discard_ratio
            )));
        }
        Ok(())
    }
}

/// Elementwise mean over heads; rows stay stochastic.
pub fn head_mean<F: Scalar>(layer: &AttnLayer<F>) -> Result<Tensor<F>> {
    let t = layer.size();
    let inv = F::cast(1.0 / layer.head_count() as f64);
    let mut data = vec![F::zero(); t * t];
    for head in layer.heads() {
        for (acc, &v) in data.iter_mut().zip(head.data()) {
            *acc = *acc + v * inv;
        }
    }
    Tensor::new(vec![t, t], data)
}

/// Zeroes the globally smallest `floor(ratio * (T^2 - protected))` entries,
/// never touching row 0 or column 0 (the class-token links). With
/// `renormalize_rows`, surviving rows rescale to sum 1 and rows left empty
/// become one-hot on the class column.
pub fn prune_discard<F: Scalar>(m: &Tensor<F>, cfg: &RolloutConfig) -> Result<Tensor<F>> {
    cfg.validate()?;
    let t = match m.shape() {
        [r, c] if r == c => *r,
        other => {
            return Err(Error::InvalidShape(format!(
                "prune_discard: expected a square matrix, got {other:?}"
            )))
        }
    };
    let mut data = m.data().to_vec();
    if cfg.discard_ratio > 0.0 && t > 1 {
        let protected = 2 * t - 1;
        let discard = (cfg.discard_ratio * (t * t - protected) as f64).floor() as usize;
        if discard > 0 {
            // Candidates exclude the class row and column; ties break on
            // (row, col) so the pruned set is deterministic.
            let mut candidates: Vec<(usize, usize)> = Vec::with_capacity((t - 1) * (t - 1));
            for i in 1..t {
                for j in 1..t {
                    candidates.push((i, j));
                }
            }
            candidates.sort_by(|&(ai, aj), &(bi, bj)| {
                let a = data[ai * t + aj];
                let b = data[bi * t + bj];
                a.partial_cmp(&b)
                    .expect("attention weights are finite")
                    .then(ai.cmp(&bi))
                    .then(aj.cmp(&bj))
            });
            for &(i, j) in candidates.iter().take(discard) {
                data[i * t + j] = F::zero();
            }
        }
    }
    if cfg.renormalize_rows {
        for i in 0..t {
            let mut sum = F::zero();
            for j in 0..t {
                sum = sum + data[i * t + j];
            }
            if sum > F::zero() {
                for j in 0..t {
                    data[i * t + j] = data[i * t + j] / sum;
                }
            } else {
                for j in 0..t {
                    data[i * t + j] = if j == 0 { F::one() } else { F::zero() };
                }
            }
        }
    }
    Tensor::new(vec![t, t], data)
}

fn process_layer<F: Scalar>(layer: &AttnLayer<F>, cfg: &RolloutConfig) -> Result<Tensor<F>> {
    let mean = head_mean(layer)?;
    let pruned = prune_discard(&mean, cfg)?;
    if !cfg.residual_mix {
        return Ok(pruned);
    }
    let t = pruned.nrows();
    let half = F::cast(0.5);
    let mut data = pruned.data().to_vec();
    for (idx, v) in data.iter_mut().enumerate() {
        let (i, j) = (idx / t, idx % t);
        let eye = if i == j { F::one() } else { F::zero() };
        *v = (*v + eye) * half;
    }
    Tensor::new(vec![t, t], data)
}

/// Rollout through `layers`. In `PerLayer` mode only `layers[layer_index]`
/// is processed; in `Chained` mode the processed matrices of layers
/// `0..=layer_index` multiply in order (later layers on the left).
pub fn rollout<F: Scalar>(
    layers: &[AttnLayer<F>],
    cfg: &RolloutConfig,
    layer_index: usize,
) -> Result<Tensor<F>> {
    cfg.validate()?;
    if layers.is_empty() {
        return Err(Error::InvalidValue("rollout: empty layer chain".into()));
    }
    if layer_index >= layers.len() {
        return Err(Error::InvalidValue(format!(
            "rollout: layer index {layer_index} out of range 0..{}",
            layers.len()
        )));
    }
    match cfg.mode {
        RolloutMode::PerLayer => process_layer(&layers[layer_index], cfg),
        RolloutMode::Chained => {
            let mut acc = process_layer(&layers[0], cfg)?;
            for layer in &layers[1..=layer_index] {
                acc = process_layer(layer, cfg)?.matmul(&acc)?;
            }
            Ok(acc)
        }
    }
}

/// Extracts the class-token row over patch columns, min-max normalizes it to
/// `[0, 1]` (a flat row maps to all zeros), and reshapes it row-major onto
/// the `rows x cols` grid.
pub fn class_heatmap<F: Scalar>(r: &Tensor<F>, rows: usize, cols: usize) -> Result<Tensor<F>> {
    let t = match r.shape() {
        [a, b] if a == b => *a,
        other => {
            return Err(Error::InvalidShape(format!(
                "class_heatmap: expected a square matrix, got {other:?}"
            )))
        }
    };
    if t != rows * cols + 1 {
        return Err(Error::InvalidShape(format!(
            "class_heatmap: matrix side {t} != rows*cols + 1 = {}",
            rows * cols + 1
        )));
    }
    let class_row = &r.row(0)[1..];
    let mut min = class_row[0];
    let mut max = class_row[0];
    for &v in class_row {
        if v < min {
            min = v;
        }
        if v > max {
            max = v;
        }
    }
    let span = max - min;
    let data: Vec<F> = if span > F::zero() {
        class_row.iter().map(|&v| (v - min) / span).collect()
    } else {
        vec![F::zero(); class_row.len()]
    };
    Tensor::new(vec![rows, cols], data)
}

/// Writes a heatmap as an ASCII PGM ("P2"), maxval 255, one grid row per
/// line, pixel = round(255 * value).
pub fn write_pgm<F: Scalar, W: Write>(heatmap: &Tensor<F>, mut out: W) -> Result<()> {
    let (rows, cols) = match heatmap.shape() {
        [r, c] => (*r, *c),
        other => {
            return Err(Error::InvalidShape(format!(
                "pgm: expected a 2-D heatmap, got {other:?}"
            )))
        }
    };
    writeln!(out, "P2")?;
    writeln!(out, "{cols} {rows}")?;
    writeln!(out, "255")?;
    for i in 0..rows {
        let line: Vec<String> = heatmap.row(i)
            .iter()
            .map(|&v| {
                let px = (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u32;
                px.to_string()
            })
            .collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}
