//! Seeded synthetic encoder stacks with controllable depth-dependent spatial
//! concentration: per layer, patch activation norms follow a Gaussian bump
//! around a blob center whose sharpness comes from a per-layer schedule, so
//! entropy profiles, layer selection, rollout, and the full connector can be
//! exercised without any pretrained model.
//!
//! Generation is counter-based: every random value is a pure function of
//! (seed, layer, token, channel), so layers can be produced in any order and
//! identical seeds give bit-identical stacks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cmvt;
use crate::entropy::LayerStack;
use crate::error::{Error, Result};
use crate::fusion::grid_positions;
use crate::grid::TokenGrid;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Noise amplitude relative to the bump peak; small enough that a doubling
/// concentration schedule still yields strictly monotone entropy profiles.
pub const NOISE_FRACTION: f64 = 0.01;

fn default_center() -> (f64, f64) {
    (0.5, 0.5)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub layers: usize,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// Per-layer bump sharpness; higher values concentrate the activation
    /// mass closer to the blob center.
    pub concentration_schedule: Vec<f64>,
    /// Blob center in the unit square.
    #[serde(default = "default_center")]
    pub blob_center: (f64, f64),
    /// Also generate per-layer attention tensors (single head) whose
    /// class-token row is proportional to the same bump.
    #[serde(default)]
    pub with_attention: bool,
}

impl SynthSpec {
    /// Geometric schedule `kappa_l = 2^l`, the canonical depth-concentration
    /// profile used in tests.
    pub fn geometric(seed: u64, layers: usize, rows: usize, cols: usize, dim: usize) -> Self {
        SynthSpec {
            seed,
            layers,
            rows,
            cols,
            dim,
            concentration_schedule: (0..layers).map(|l| (2.0f64).powi(l as i32)).collect(),
            blob_center: default_center(),
            with_attention: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.rows == 0 || self.cols == 0 || self.dim == 0 {
            return Err(Error::InvalidValue(
                "synth: layers, rows, cols, and dim must be >= 1".into(),
            ));
        }
        if self.concentration_schedule.len() != self.layers {
            return Err(Error::InvalidValue(format!(
                "synth: schedule has {} entries for {} layers",
                self.concentration_schedule.len(),
                self.layers
            )));
        }
        if self
            .concentration_schedule
            .iter()
            .any(|&k| !k.is_finite() || k <= 0.0)
        {
            return Err(Error::InvalidValue(
                "synth: concentration values must be finite and positive".into(),
            ));
        }
        if !(self.blob_center.0.is_finite() && self.blob_center.1.is_finite()) {
            return Err(Error::InvalidValue("synth: blob center must be finite".into()));
        }
        Ok(())
    }
}

// Key-space tags so the token, noise, and attention streams never collide.
const STREAM_DIRECTION: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_CLASS: u64 = 3;

fn bump_profile(spec: &SynthSpec, kappa: f64) -> Vec<f64> {
    let pos = grid_positions::<f64>(spec.rows, spec.cols);
    pos.coords()
        .iter()
        .map(|&(x, y)| {
            let dx = x - spec.blob_center.0;
            let dy = y - spec.blob_center.1;
            (-kappa * (dx * dx + dy * dy)).exp()
        })
        .collect()
}

fn token_with_norm<F: Scalar>(spec: &SynthSpec, layer: usize, token: u64, norm: f64) -> Vec<F> {
    let raw: Vec<f64> = (0..spec.dim)
        .map(|c| rng::normal_f64(&[spec.seed, STREAM_DIRECTION, layer as u64, token, c as u64]))
        .collect();
    let len: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if len > 0.0 {
        raw.iter().map(|v| F::cast(v / len * norm)).collect()
    } else {
        // Unreachable in practice; a canonical axis keeps the norm contract.
        let mut t = vec![F::zero(); spec.dim];
        t[0] = F::cast(norm);
        t
    }
}

/// Generates the stack described by `spec`; layer indices are 1-based.
pub fn make_stack<F: Scalar>(spec: &SynthSpec) -> Result<LayerStack<F>> {
    spec.validate()?;
    let n = spec.rows * spec.cols;
    let mut grids = Vec::with_capacity(spec.layers);
    let mut attns = Vec::with_capacity(spec.layers);
    for (layer, &kappa) in spec.concentration_schedule.iter().enumerate() {
        let bump = bump_profile(spec, kappa);
        let peak = bump.iter().cloned().fold(f64::MIN, f64::max);
        let norms: Vec<f64> = bump
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                b + NOISE_FRACTION
                    * peak
                    * rng::unit_f64(&[spec.seed, STREAM_NOISE, layer as u64, i as u64])
            })
            .collect();

        let token_count = n + usize::from(spec.with_attention);
        let mut data: Vec<F> = Vec::with_capacity(token_count * spec.dim);
        if spec.with_attention {
            let class: Vec<f64> = (0..spec.dim)
                .map(|c| rng::normal_f64(&[spec.seed, STREAM_CLASS, layer as u64, c as u64]))
                .collect();
            let len: f64 = class.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            data.extend(class.iter().map(|&v| F::cast(v / len)));
        }
        for (i, &norm) in norms.iter().enumerate() {
            data.extend(token_with_norm::<F>(spec, layer, i as u64, norm));
        }
        let tokens = Tensor::new(vec![token_count, spec.dim], data)?;
        grids.push(TokenGrid::new(
            spec.rows,
            spec.cols,
            tokens,
            spec.with_attention,
        )?);

        if spec.with_attention {
            let t = n + 1;
            let bump_sum: f64 = bump.iter().sum();
            let mut attn = vec![F::zero(); t * t];
            // Class row: bump-proportional over patches, zero self-weight.
            for (p, &b) in bump.iter().enumerate() {
                attn[1 + p] = F::cast(b / bump_sum);
            }
            // Patch rows: uniform.
            let uniform = F::cast(1.0 / t as f64);
            for r in 1..t {
                for c in 0..t {
                    attn[r * t + c] = uniform;
                }
            }
            attns.push(Tensor::new(vec![1, t, t], attn)?);
        }
    }
    LayerStack::new(
        format!("synth-{}", spec.seed),
        grids,
        (1..=spec.layers).collect(),
        spec.with_attention.then_some(attns),
    )
}

/// Writes a stack as `layer_%03d.cmvt` (token tensors) plus `attn_%03d.cmvt`
/// when attention is present, numbered by layer index.
pub fn write_stack<F: Scalar>(stack: &LayerStack<F>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (pos, grid) in stack.layers().iter().enumerate() {
        let idx = stack.layer_indices()[pos];
        cmvt::write_file(grid.tokens(), &dir.join(format!("layer_{idx:03}.cmvt")))?;
        if let Some(attn) = stack.attn() {
            cmvt::write_file(&attn[pos], &dir.join(format!("attn_{idx:03}.cmvt")))?;
        }
    }
    Ok(())
}
