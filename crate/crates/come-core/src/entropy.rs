//! Spatial entropy per layer and entropy-informed candidate layer selection.
//!
//! The entropy of a layer is the Shannon entropy (in nats) of its normalized
//! per-patch mass distribution: high entropy means spatially diffuse
//! evidence, low entropy means activity concentrated on a few patches. Mass
//! comes either from class-token attention (averaged over heads) or from
//! per-patch activation norms.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where per-patch mass comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MassSource {
    /// Class-token attention to patches, averaged over heads. Needs an
    /// attention tensor of shape (heads, T, T) and a class token at row 0.
    AttentionMass,
    /// L2 norm of each patch token.
    ActivationNorm,
}

/// Ordered per-layer token grids from one encoder, all sharing geometry.
#[derive(Debug, Clone)]
pub struct LayerStack<F: Scalar> {
    encoder_id: String,
    layers: Vec<TokenGrid<F>>,
    layer_indices: Vec<usize>,
    attn: Option<Vec<Tensor<F>>>,
}

impl<F: Scalar> LayerStack<F> {
    pub fn new(
        encoder_id: impl Into<String>,
        layers: Vec<TokenGrid<F>>,
        layer_indices: Vec<usize>,
        attn: Option<Vec<Tensor<F>>>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidShape("layer stack: no layers".into()));
        }
        if layer_indices.len() != layers.len() {
            return Err(Error::InvalidShape(format!(
                "layer stack: {} layers but {} indices",
                layers.len(),
                layer_indices.len()
            )));
        }
        if !layer_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidValue(
                "layer stack: layer indices must be strictly increasing".into(),
            ));
        }
        let first = &layers[0];
        for (i, g) in layers.iter().enumerate() {
            if g.rows() != first.rows()
                || g.cols() != first.cols()
                || g.dim() != first.dim()
                || g.class_token_present() != first.class_token_present()
            {
                return Err(Error::InvalidShape(format!(
                    "layer stack: layer {i} geometry differs from layer 0"
                )));
            }
        }
        if let Some(attn) = &attn {
            if attn.len() != layers.len() {
                return Err(Error::InvalidShape(format!(
                    "layer stack: {} layers but {} attention tensors",
                    layers.len(),
                    attn.len()
                )));
            }
            let t = first.token_count();
            for (i, a) in attn.iter().enumerate() {
                match a.shape() {
                    [h, r, c] if *h >= 1 && *r == t && *c == t => {}
                    other => {
                        return Err(Error::InvalidShape(format!(
                            "layer stack: attention {i} must be (heads, {t}, {t}), got {other:?}"
                        )))
                    }
                }
            }
        }
        Ok(LayerStack {
            encoder_id: encoder_id.into(),
            layers,
            layer_indices,
            attn,
        })
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn layers(&self) -> &[TokenGrid<F>] {
        &self.layers
    }

    pub fn layer_indices(&self) -> &[usize] {
        &self.layer_indices
    }

    pub fn attn(&self) -> Option<&[Tensor<F>]> {
        self.attn.as_deref()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// The grid stored under a given layer index.
    pub fn layer_by_index(&self, index: usize) -> Option<&TokenGrid<F>> {
        let pos = self.layer_indices.iter().position(|&i| i == index)?;
        Some(&self.layers[pos])
    }
}

/// Per-layer spatial entropies, aligned with their layer indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProfile<F: Scalar> {
    pub layer_indices: Vec<usize>,
    pub entropy_nats: Vec<F>,
}

impl<F: Scalar> EntropyProfile<F> {
    /// CSV rendering: header `layer,entropy_nats`, entropies with 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,entropy_nats\n");
        for (idx, h) in self.layer_indices.iter().zip(&self.entropy_nats) {
            out.push_str(&format!("{idx},{:.6}\n", h.as_f64()));
        }
        out
    }
}

/// How a layer selection was produced.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectionPolicy {
    /// Maximal contiguous run inside an empirical quantile band.
    QuantileBand { q_lo: f64, q_hi: f64 },
    /// Explicitly supplied index list.
    Explicit,
}

/// A chosen subset of a stack's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSelection {
    pub encoder_id: String,
    /// Selected layer indices, ascending; never empty.
    pub selected: Vec<usize>,
    pub policy: SelectionPolicy,
}

impl LayerSelection {
    /// Builds a selection from an explicit index list.
    pub fn explicit(encoder_id: impl Into<String>, mut indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::NoLayersSelected(
                "explicit selection: empty index list".into(),
            ));
        }
        indices.sort_unstable();
        indices.dedup();
        Ok(LayerSelection {
            encoder_id: encoder_id.into(),
            selected: indices,
            policy: SelectionPolicy::Explicit,
        })
    }
}

/// Shannon entropy (nats) of the normalized per-patch mass of one grid.
///
/// Mass must be non-negative with a positive total; an all-zero mass has no
/// distribution and is rejected.
pub fn spatial_entropy<F: Scalar>(
    grid: &TokenGrid<F>,
    source: MassSource,
    attn: Option<&Tensor<F>>,
) -> Result<F> {
    let mass = patch_mass(grid, source, attn)?;
    entropy_of_mass(&mass)
}

fn patch_mass<F: Scalar>(
    grid: &TokenGrid<F>,
    source: MassSource,
    attn: Option<&Tensor<F>>,
) -> Result<Vec<F>> {
    let n = grid.patch_count();
    match source {
        MassSource::ActivationNorm => {
            let mut mass = Vec::with_capacity(n);
            for r in 0..grid.rows() {
                for c in 0..grid.cols() {
                    let tok = grid.patch(r, c);
                    let mut acc = F::zero();
                    for &v in tok {
                        acc = acc + v * v;
                    }
                    mass.push(acc.sqrt());
                }
            }
            Ok(mass)
        }
        MassSource::AttentionMass => {
            let attn = attn.ok_or_else(|| {
                Error::InvalidValue(
                    "spatial_entropy: attention_mass source needs an attention tensor".into(),
                )
            })?;
            if !grid.class_token_present() {
                return Err(Error::InvalidValue(
                    "spatial_entropy: attention_mass source needs a class token".into(),
                ));
            }
            let t = grid.token_count();
            let heads = match attn.shape() {
                [h, r, c] if *r == t && *c == t && *h >= 1 => *h,
                other => {
                    return Err(Error::InvalidShape(format!(
                        "spatial_entropy: attention must be (heads, {t}, {t}), got {other:?}"
                    )))
                }
            };
            // Class-token query row (row 0), averaged over heads, restricted
            // to the patch columns 1..T.
            let inv_heads = F::cast(1.0 / heads as f64);
            let mut mass = vec![F::zero(); n];
            for h in 0..heads {
                let base = h * t * t; // row 0 of head h
                for p in 0..n {
                    let v = attn.data()[base + 1 + p];
                    if v < F::zero() {
                        return Err(Error::InvalidValue(format!(
                            "spatial_entropy: negative attention mass at head {h}, patch {p}"
                        )));
                    }
                    mass[p] = mass[p] + v * inv_heads;
                }
            }
            Ok(mass)
        }
    }
}

fn entropy_of_mass<F: Scalar>(mass: &[F]) -> Result<F> {
    if mass.is_empty() {
        return Err(Error::InvalidShape("entropy: no patches".into()));
    }
    let mut total = F::zero();
    for (i, &m) in mass.iter().enumerate() {
        if m < F::zero() {
            return Err(Error::InvalidValue(format!(
                "entropy: negative mass at patch {i}"
            )));
        }
        total = total + m;
    }
    if total <= F::zero() {
        return Err(Error::DegenerateDistribution(
            "entropy: all-zero mass".into(),
        ));
    }
    let mut h = F::zero();
    for &m in mass {
        if m > F::zero() {
            let p = m / total;
            h = h - p * p.ln();
        }
    }
    // Clamp the tiny negative rounding that a one-hot distribution can leave.
    Ok(if h < F::zero() { F::zero() } else { h })
}

/// Applies [`spatial_entropy`] to every layer of a stack, preserving order.
/// Per-layer work runs in parallel; assembly order is deterministic.
pub fn entropy_profile<F: Scalar>(
    stack: &LayerStack<F>,
    source: MassSource,
) -> Result<EntropyProfile<F>> {
    let entropies: Vec<F> = stack
        .layers()
        .par_iter()
        .enumerate()
        .map(|(pos, grid)| {
            let attn = stack.attn().map(|a| &a[pos]);
            spatial_entropy(grid, source, attn)
                .map_err(|e| e.at_layer(stack.layer_indices()[pos]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EntropyProfile {
        layer_indices: stack.layer_indices().to_vec(),
        entropy_nats: entropies,
    })
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Selects the maximal contiguous run of layers whose entropy falls in the
/// `[q_lo, q_hi]` empirical quantile band. Equal-length runs tie-break to the
/// deeper one; `(0, 1)` selects every layer.
pub fn select_layers<F: Scalar>(
    encoder_id: impl Into<String>,
    profile: &EntropyProfile<F>,
    q_lo: f64,
    q_hi: f64,
) -> Result<LayerSelection> {
    if !(0.0..=1.0).contains(&q_lo) || !(0.0..=1.0).contains(&q_hi) || q_lo >= q_hi {
        return Err(Error::InvalidValue(format!(
            "select_layers: need 0 <= q_lo < q_hi <= 1, got ({q_lo}, {q_hi})"
        )));
    }
    if profile.layer_indices.is_empty() {
        return Err(Error::InvalidShape("select_layers: empty profile".into()));
    }
    let mut sorted: Vec<f64> = profile.entropy_nats.iter().map(|h| h.as_f64()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("entropies are finite"));
    let lo = quantile(&sorted, q_lo);
    let hi = quantile(&sorted, q_hi);

    let in_band: Vec<bool> = profile
        .entropy_nats
        .iter()
        .map(|h| {
            let v = h.as_f64();
            v >= lo && v <= hi
        })
        .collect();

    // Maximal contiguous run; >= so a later (deeper) run of equal length wins.
    let mut best: Option<(usize, usize)> = None; // (start, len)
    let mut run_start = 0usize;
    let mut run_len = 0usize;
    for (i, &ok) in in_band.iter().enumerate() {
        if ok {
            if run_len == 0 {
                run_start = i;
            }
            run_len += 1;
            if best.map_or(true, |(_, blen)| run_len >= blen) {
                best = Some((run_start, run_len));
            }
        } else {
            run_len = 0;
        }
    }
    let (start, len) = best.ok_or_else(|| {
        Error::NoLayersSelected(format!(
            "no layer entropy falls inside the ({q_lo}, {q_hi}) quantile band [{lo:.6}, {hi:.6}]"
        ))
    })?;
    Ok(LayerSelection {
        encoder_id: encoder_id.into(),
        selected: profile.layer_indices[start..start + len].to_vec(),
        policy: SelectionPolicy::QuantileBand { q_lo, q_hi },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_grid(rows: usize, cols: usize) -> TokenGrid<f64> {
        let t = Tensor::new(vec![rows * cols, 1], vec![1.0; rows * cols]).unwrap();
        TokenGrid::new(rows, cols, t, false).unwrap()
    }

    fn grid_with_norms(rows: usize, cols: usize, norms: &[f64]) -> TokenGrid<f64> {
        let t = Tensor::new(vec![rows * cols, 1], norms.to_vec()).unwrap();
        TokenGrid::new(rows, cols, t, false).unwrap()
    }

    fn profile_of(values: &[f64]) -> EntropyProfile<f64> {
        EntropyProfile {
            layer_indices: (1..=values.len()).collect(),
            entropy_nats: values.to_vec(),
        }
    }

    #[test]
    fn uniform_mass_hits_ln_n() {
        let g = uniform_grid(24, 24);
        let h = spatial_entropy(&g, MassSource::ActivationNorm, None).unwrap();
        assert!((h - (576f64).ln()).abs() < 1e-10);
        assert!((h - 6.3561).abs() < 1e-3);
    }

    #[test]
    fn one_hot_mass_is_zero() {
        let mut norms = vec![0.0; 16];
        norms[5] = 3.0;
        let g = grid_with_norms(4, 4, &norms);
        let h = spatial_entropy(&g, MassSource::ActivationNorm, None).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn hand_mass_distribution() {
        // mass [2,2,4,8] -> p [1/8,1/8,1/4,1/2] -> H = 1.75 ln 2
        let g = grid_with_norms(2, 2, &[2.0, 2.0, 4.0, 8.0]);
        let h = spatial_entropy(&g, MassSource::ActivationNorm, None).unwrap();
        assert!((h - 1.75 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn all_zero_mass_is_degenerate() {
        let g = grid_with_norms(2, 2, &[0.0; 4]);
        let err = spatial_entropy(&g, MassSource::ActivationNorm, None).unwrap_err();
        assert!(matches!(err, Error::DegenerateDistribution(_)));
    }

    #[test]
    fn attention_mass_uses_class_row_mean_over_heads() {
        // 2x2 grid + class token (T = 5), two heads. Head 0 puts the class
        // attention uniformly on patches; head 1 concentrates on patch 3.
        let t = 5usize;
        let tokens = Tensor::new(vec![t, 2], vec![1.0; t * 2]).unwrap();
        let grid = TokenGrid::new(2, 2, tokens, true).unwrap();
        let mut attn = vec![0.0f64; 2 * t * t];
        for p in 0..4 {
            attn[1 + p] = 0.25; // head 0, row 0
        }
        attn[t * t + 4] = 1.0; // head 1, row 0, patch 3
        for h in 0..2 {
            for r in 1..t {
                attn[h * t * t + r * t + r] = 1.0; // keep other rows stochastic
            }
        }
        let attn = Tensor::new(vec![2, t, t], attn).unwrap();
        let h = spatial_entropy(&grid, MassSource::AttentionMass, Some(&attn)).unwrap();
        // mass = [0.125, 0.125, 0.125, 0.625]
        let expected = -(3.0 * 0.125 * 0.125f64.ln() + 0.625 * 0.625f64.ln());
        assert!((h - expected).abs() < 1e-12);
    }

    #[test]
    fn attention_mass_requires_tensor_and_class() {
        let g = uniform_grid(2, 2);
        assert!(spatial_entropy(&g, MassSource::AttentionMass, None).is_err());
        let attn = Tensor::new(vec![1, 4, 4], vec![0.25; 16]).unwrap();
        assert!(spatial_entropy(&g, MassSource::AttentionMass, Some(&attn)).is_err());
    }

    #[test]
    fn profile_constant_stack_is_flat() {
        let g = grid_with_norms(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let stack = LayerStack::new("e", vec![g.clone(), g.clone(), g], vec![1, 2, 3], None)
            .unwrap();
        let p = entropy_profile(&stack, MassSource::ActivationNorm).unwrap();
        assert_eq!(p.layer_indices, vec![1, 2, 3]);
        assert_eq!(p.entropy_nats[0], p.entropy_nats[1]);
        assert_eq!(p.entropy_nats[1], p.entropy_nats[2]);
    }

    #[test]
    fn profile_single_layer() {
        let g = uniform_grid(2, 2);
        let stack = LayerStack::new("e", vec![g], vec![7], None).unwrap();
        let p = entropy_profile(&stack, MassSource::ActivationNorm).unwrap();
        assert_eq!(p.layer_indices, vec![7]);
        assert_eq!(p.entropy_nats.len(), 1);
    }

    #[test]
    fn profile_error_names_layer_index() {
        let good = grid_with_norms(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let bad = grid_with_norms(2, 2, &[0.0; 4]);
        let stack = LayerStack::new("e", vec![good, bad], vec![4, 9], None).unwrap();
        let err = entropy_profile(&stack, MassSource::ActivationNorm).unwrap_err();
        match err {
            Error::Layer { index, .. } => assert_eq!(index, 9),
            other => panic!("expected layer-annotated error, got {other}"),
        }
    }

    #[test]
    fn full_band_selects_everything() {
        let p = profile_of(&[5.0, 4.0, 3.0, 2.0]);
        let sel = select_layers("e", &p, 0.0, 1.0).unwrap();
        assert_eq!(sel.selected, vec![1, 2, 3, 4]);
    }

    #[test]
    fn decreasing_profile_low_band_selects_deep_run() {
        // Strictly decreasing over 24 layers: the (0, 0.58) band keeps the 14
        // lowest-entropy (deepest) layers, indices 11..=24.
        let values: Vec<f64> = (0..24).map(|l| 6.0 - 0.2 * l as f64).collect();
        let p = profile_of(&values);
        let sel = select_layers("d", &p, 0.0, 0.58).unwrap();
        assert_eq!(sel.selected, (11..=24).collect::<Vec<_>>());
    }

    #[test]
    fn equal_runs_tie_break_deeper() {
        // Band layers: 2,3 and 5,6 qualify (entropy 1.0); the deeper run wins.
        let p = profile_of(&[9.0, 1.0, 1.0, 9.0, 1.0, 1.0]);
        let sel = select_layers("e", &p, 0.0, 0.5).unwrap();
        assert_eq!(sel.selected, vec![5, 6]);
    }

    #[test]
    fn empty_band_is_an_error() {
        let p = profile_of(&[0.0, 10.0]);
        let err = select_layers("e", &p, 0.4, 0.6).unwrap_err();
        assert!(matches!(err, Error::NoLayersSelected(_)));
    }

    #[test]
    fn csv_format() {
        let p = profile_of(&[1.0, 0.5]);
        let csv = p.to_csv();
        assert_eq!(csv, "layer,entropy_nats\n1,1.000000\n2,0.500000\n");
    }
}
