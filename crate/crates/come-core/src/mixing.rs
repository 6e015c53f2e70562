//! Softmax layer-mixing weights and intra-encoder multi-layer aggregation:
//! each selected layer is normalized, projected through its orthogonal layer,
//! and the results are combined as a weighted sum.

use rayon::prelude::*;

use crate::entropy::{LayerSelection, LayerStack};
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::ortho::OrthoLayer;
use crate::scalar::Scalar;
use crate::tensor::{softmax, Tensor};

/// One logit per selected layer plus the softmax weights derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingWeights<F: Scalar> {
    logits: Vec<F>,
    weights: Vec<F>,
}

impl<F: Scalar> MixingWeights<F> {
    pub fn from_logits(logits: &[F]) -> Result<Self> {
        let weights = softmax(logits)?;
        Ok(MixingWeights {
            logits: logits.to_vec(),
            weights,
        })
    }

    /// Uniform weights: all logits zero.
    pub fn uniform(count: usize) -> Result<Self> {
        Self::from_logits(&vec![F::zero(); count])
    }

    /// Builds weights and checks the logit count against a selection.
    pub fn for_selection(logits: &[F], selection: &LayerSelection) -> Result<Self> {
        if logits.len() != selection.selected.len() {
            return Err(Error::InvalidShape(format!(
                "mixing weights: {} logits for {} selected layers",
                logits.len(),
                selection.selected.len()
            )));
        }
        Self::from_logits(logits)
    }

    pub fn logits(&self) -> &[F] {
        &self.logits
    }

    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// Weighted sum of per-layer LN -> orthogonal projections:
/// `V_e = sum_l w_l * OL_l(LN(Z_l))`.
///
/// One orthogonal layer per selected layer; all must share `d_out`.
pub fn aggregate<F: Scalar>(
    stack: &LayerStack<F>,
    selection: &LayerSelection,
    weights: &MixingWeights<F>,
    ols: &[OrthoLayer<F>],
    ln_epsilon: F,
) -> Result<TokenGrid<F>> {
    aggregate_impl(stack, selection, weights, ols, Some(ln_epsilon))
}

/// [`aggregate`] with the normalization stage bypassed; diagnostic hook for
/// checking linearity/homogeneity in the stacked inputs.
pub fn aggregate_unnormalized<F: Scalar>(
    stack: &LayerStack<F>,
    selection: &LayerSelection,
    weights: &MixingWeights<F>,
    ols: &[OrthoLayer<F>],
) -> Result<TokenGrid<F>> {
    aggregate_impl(stack, selection, weights, ols, None)
}

fn aggregate_impl<F: Scalar>(
    stack: &LayerStack<F>,
    selection: &LayerSelection,
    weights: &MixingWeights<F>,
    ols: &[OrthoLayer<F>],
    ln_epsilon: Option<F>,
) -> Result<TokenGrid<F>> {
    let k = selection.selected.len();
    if weights.len() != k {
        return Err(Error::InvalidShape(format!(
            "aggregate: {} weights for {k} selected layers",
            weights.len()
        )));
    }
    if ols.len() != k {
        return Err(Error::InvalidShape(format!(
            "aggregate: {} orthogonal layers for {k} selected layers",
            ols.len()
        )));
    }
    let d_out = ols[0].d_out();
    if ols.iter().any(|ol| ol.d_out() != d_out) {
        return Err(Error::InvalidShape(
            "aggregate: orthogonal layers disagree on d_out".into(),
        ));
    }
    // Per-layer LN -> OL projections, evaluated in parallel, combined in
    // selection order so the output is deterministic.
    let projected: Vec<Tensor<F>> = selection
        .selected
        .par_iter()
        .zip(ols.par_iter())
        .map(|(&layer_idx, ol)| {
            let grid = stack.layer_by_index(layer_idx).ok_or_else(|| {
                Error::InvalidValue(format!(
                    "aggregate: selected layer {layer_idx} not present in stack '{}'",
                    stack.encoder_id()
                ))
            })?;
            let tokens = match ln_epsilon {
                Some(eps) => grid.tokens().layer_norm(eps)?,
                None => grid.tokens().clone(),
            };
            ol.apply(&tokens).map_err(|e| e.at_layer(layer_idx))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut acc = Tensor::zeros(projected[0].shape().to_vec())?;
    for (w, p) in weights.weights().iter().zip(&projected) {
        acc = acc.add(&p.scale(*w)?)?;
    }
    let template = &stack.layers()[0];
    TokenGrid::new(
        template.rows(),
        template.cols(),
        acc,
        template.class_token_present(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ortho::{random_skew, OrthoMethod};

    fn stack_of(grids: Vec<TokenGrid<f64>>) -> LayerStack<f64> {
        let n = grids.len();
        LayerStack::new("e", grids, (1..=n).collect(), None).unwrap()
    }

    fn grid1x1(value: f64, dim: usize) -> TokenGrid<f64> {
        let data: Vec<f64> = (0..dim).map(|i| value + i as f64).collect();
        TokenGrid::new(1, 1, Tensor::new(vec![1, dim], data).unwrap(), false).unwrap()
    }

    #[test]
    fn uniform_logits_give_uniform_weights() {
        let mw = MixingWeights::<f64>::uniform(4).unwrap();
        for &w in mw.weights() {
            assert_eq!(w, 0.25);
        }
    }

    #[test]
    fn shift_invariance() {
        let logits = [0.3f64, -1.2, 2.0];
        let base = MixingWeights::from_logits(&logits).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|l| l + 17.5).collect();
        let moved = MixingWeights::from_logits(&shifted).unwrap();
        for (a, b) in base.weights().iter().zip(moved.weights()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn hand_logits() {
        let mw = MixingWeights::from_logits(&[3.0f64.ln(), 0.0]).unwrap();
        assert!((mw.weights()[0] - 0.75).abs() < 1e-15);
        assert!((mw.weights()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn for_selection_checks_length() {
        let sel = LayerSelection::explicit("e", vec![1, 2, 3]).unwrap();
        assert!(MixingWeights::for_selection(&[0.0f64; 2], &sel).is_err());
        assert!(MixingWeights::for_selection(&[0.0f64; 3], &sel).is_ok());
    }

    #[test]
    fn single_layer_identity_ol_is_layer_norm() {
        let grid = grid1x1(1.0, 4);
        let expected = grid.tokens().layer_norm(1e-6).unwrap();
        let stack = stack_of(vec![grid]);
        let sel = LayerSelection::explicit("e", vec![1]).unwrap();
        let mw = MixingWeights::uniform(1).unwrap();
        let ols = vec![OrthoLayer::zero(4, 4, OrthoMethod::Cayley).unwrap()];
        let out = aggregate(&stack, &sel, &mw, &ols, 1e-6).unwrap();
        assert_eq!(out.tokens(), &expected);
    }

    #[test]
    fn identical_layers_convexity() {
        let grid = grid1x1(2.0, 3);
        let stack = stack_of(vec![grid.clone(), grid.clone()]);
        let sel = LayerSelection::explicit("e", vec![1, 2]).unwrap();
        let ols = vec![
            OrthoLayer::zero(3, 3, OrthoMethod::Cayley).unwrap(),
            OrthoLayer::zero(3, 3, OrthoMethod::Cayley).unwrap(),
        ];
        let single = {
            let sel1 = LayerSelection::explicit("e", vec![1]).unwrap();
            aggregate(
                &stack,
                &sel1,
                &MixingWeights::uniform(1).unwrap(),
                &ols[..1],
                1e-6,
            )
            .unwrap()
        };
        let mw = MixingWeights::from_logits(&[0.9f64, -0.4]).unwrap();
        let both = aggregate(&stack, &sel, &mw, &ols, 1e-6).unwrap();
        let diff = both.tokens().max_abs_diff(single.tokens()).unwrap();
        assert!(diff <= 1e-15);
    }

    #[test]
    fn two_scalar_grids_weighted_sum() {
        // 1x1 grids with dim 2 so layer norm is non-degenerate; weights
        // (0.25, 0.75) on hand-computable normalized rows.
        let g1 = TokenGrid::new(
            1,
            1,
            Tensor::from_rows(&[vec![-1.0f64, 1.0]]).unwrap(),
            false,
        )
        .unwrap();
        let g2 = TokenGrid::new(
            1,
            1,
            Tensor::from_rows(&[vec![4.0f64, 2.0]]).unwrap(),
            false,
        )
        .unwrap();
        let stack = stack_of(vec![g1, g2]);
        let sel = LayerSelection::explicit("e", vec![1, 2]).unwrap();
        // softmax(ln 3, 0) reversed: weights (0.25, 0.75)
        let mw = MixingWeights::from_logits(&[0.0, 3.0f64.ln()]).unwrap();
        let ols = vec![
            OrthoLayer::zero(2, 2, OrthoMethod::Cayley).unwrap(),
            OrthoLayer::zero(2, 2, OrthoMethod::Cayley).unwrap(),
        ];
        let out = aggregate(&stack, &sel, &mw, &ols, 1e-12).unwrap();
        // LN([-1,1]) ~ [-1,1]; LN([4,2]) ~ [1,-1]; 0.25*[-1,1]+0.75*[1,-1] = [0.5,-0.5]
        assert!((out.tokens().at(0, 0) - 0.5).abs() < 1e-5);
        assert!((out.tokens().at(0, 1) + 0.5).abs() < 1e-5);
    }

    #[test]
    fn aggregate_homogeneity_without_ln() {
        let g = grid1x1(3.0, 4);
        let lambda = 2.5f64;
        let scaled = g
            .with_tokens(g.tokens().scale(lambda).unwrap())
            .unwrap();
        let ols: Vec<_> = (0..1)
            .map(|i| {
                OrthoLayer::new(4, 4, random_skew(4, 1.0, &[900 + i]).unwrap(), OrthoMethod::Cayley)
                    .unwrap()
            })
            .collect();
        let sel = LayerSelection::explicit("e", vec![1]).unwrap();
        let mw = MixingWeights::uniform(1).unwrap();
        let base = aggregate_unnormalized(&stack_of(vec![g]), &sel, &mw, &ols).unwrap();
        let scaled_out = aggregate_unnormalized(&stack_of(vec![scaled]), &sel, &mw, &ols).unwrap();
        let expect = base.tokens().scale(lambda).unwrap();
        assert!(scaled_out.tokens().max_abs_diff(&expect).unwrap() <= 1e-12);
    }

    #[test]
    fn distinct_orthogonal_projections_decorrelate() {
        // Identical post-LN tokens through two different orthogonal maps land
        // on directions with cosine similarity strictly below 1.
        for trial in 0..10u64 {
            let d = 6usize;
            let z: Vec<f64> = (0..d)
                .map(|i| crate::rng::range_f64(&[1000 + trial, i as u64], -1.0, 1.0))
                .collect();
            let z = Tensor::new(vec![1, d], z).unwrap();
            let ol1 = OrthoLayer::new(
                d,
                d,
                random_skew(d, 1.0, &[1100 + trial]).unwrap(),
                OrthoMethod::Cayley,
            )
            .unwrap();
            let ol2 = OrthoLayer::new(
                d,
                d,
                random_skew(d, 1.0, &[1200 + trial]).unwrap(),
                OrthoMethod::Cayley,
            )
            .unwrap();
            let a = ol1.apply(&z).unwrap();
            let b = ol2.apply(&z).unwrap();
            let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            let cos = dot / (a.frobenius_norm() * b.frobenius_norm());
            assert!(cos < 1.0 - 1e-6, "trial {trial}: cosine {cos}");
        }
    }

    #[test]
    fn mismatched_ol_widths_rejected() {
        let g = grid1x1(0.0, 4);
        let stack = stack_of(vec![g.clone(), g]);
        let sel = LayerSelection::explicit("e", vec![1, 2]).unwrap();
        let mw = MixingWeights::uniform(2).unwrap();
        let ols = vec![
            OrthoLayer::zero(4, 4, OrthoMethod::Cayley).unwrap(),
            OrthoLayer::zero(4, 3, OrthoMethod::Cayley).unwrap(),
        ];
        assert!(matches!(
            aggregate(&stack, &sel, &mw, &ols, 1e-6),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn missing_selected_layer_rejected() {
        let g = grid1x1(0.0, 4);
        let stack = stack_of(vec![g]);
        let sel = LayerSelection::explicit("e", vec![5]).unwrap();
        let mw = MixingWeights::uniform(1).unwrap();
        let ols = vec![OrthoLayer::zero(4, 4, OrthoMethod::Cayley).unwrap()];
        assert!(aggregate(&stack, &sel, &mw, &ols, 1e-6).is_err());
    }
}
