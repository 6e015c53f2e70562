//! Run configuration: a strict JSON document (unknown keys abort) binding
//! layer files, selection policies, orthogonal-layer parameters, fusion
//! weights, and rollout settings into a runnable pipeline.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use come_core::cmvt;
use come_core::entropy::{entropy_profile, select_layers, LayerSelection, MassSource};
use come_core::fusion::EncoderPipeline;
use come_core::mixing::MixingWeights;
use come_core::ortho::OrthoMethod;
use come_core::rollout::{RolloutConfig, RolloutMode};
use come_core::{AttnLayer, FusionParams, LayerStack, OrthoLayer, Projection, Tensor, TokenGrid};

use crate::errors::{with_path, CliError, CliResult};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub encoders: Encoders,
    #[serde(default)]
    pub ol: Option<OlSection>,
    #[serde(default)]
    pub mixing: Option<MixingSection>,
    #[serde(default)]
    pub fusion: Option<FusionSection>,
    #[serde(default)]
    pub projection: Option<ProjectionSection>,
    #[serde(default)]
    pub r#box: Option<BoxSection>,
    #[serde(default)]
    pub rollout: Option<RolloutSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Encoders {
    #[serde(default)]
    pub query: Option<EncoderSection>,
    #[serde(default)]
    pub context: Option<EncoderSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    /// Path pattern for per-layer token tensors; `*` matches within the file
    /// name. Matches are sorted, so zero-padded numbering orders layers.
    pub layers: String,
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub class_token: bool,
    /// Layer index assigned to each matched file; defaults to 1..=n.
    #[serde(default)]
    pub layer_indices: Option<Vec<usize>>,
    /// Path pattern for per-layer attention tensors (heads, T, T).
    #[serde(default)]
    pub attention: Option<String>,
    #[serde(default)]
    pub entropy_source: EntropySource,
    #[serde(default)]
    pub select: Option<SelectSection>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySource {
    #[default]
    ActivationNorm,
    AttentionMass,
}

impl From<EntropySource> for MassSource {
    fn from(s: EntropySource) -> Self {
        match s {
            EntropySource::ActivationNorm => MassSource::ActivationNorm,
            EntropySource::AttentionMass => MassSource::AttentionMass,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectSection {
    #[serde(default)]
    pub indices: Option<Vec<usize>>,
    /// Quantile band `[q_lo, q_hi]` over the entropy profile.
    #[serde(default)]
    pub band: Option<(f64, f64)>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OlSection {
    #[serde(default = "default_method")]
    pub method: OrthoMethod,
    /// Shared output width; defaults to each encoder's token width.
    #[serde(default)]
    pub d_out: Option<usize>,
    /// Per-selected-layer parameter files (CMVT; sidecar is the same path
    /// with a .json extension). Absent lists mean zero parameters, i.e.
    /// identity-at-zero projections.
    #[serde(default)]
    pub query_params: Option<Vec<PathBuf>>,
    #[serde(default)]
    pub context_params: Option<Vec<PathBuf>>,
}

fn default_method() -> OrthoMethod {
    OrthoMethod::Cayley
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingSection {
    #[serde(default)]
    pub query_logits: Option<Vec<f64>>,
    #[serde(default)]
    pub context_logits: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    /// Directory holding W_Q.cmvt, W_K.cmvt, W_V.cmvt, W_out.cmvt (and
    /// W_proj.cmvt for a linear projection).
    pub weights_dir: PathBuf,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub d_h: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_rope_scale")]
    pub rope_scale: f64,
    /// 2x2-pool the context stream before cross-attention.
    #[serde(default)]
    pub pool: bool,
}

fn default_heads() -> usize {
    4
}

fn default_rope_base() -> f64 {
    FusionParams::DEFAULT_ROPE_BASE
}

fn default_rope_scale() -> f64 {
    FusionParams::DEFAULT_ROPE_SCALE
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ProjectionSection {
    Identity,
    Linear {
        #[serde(default)]
        file: Option<PathBuf>,
    },
    Mlp {
        hidden: PathBuf,
        output: PathBuf,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSection {
    #[serde(default = "default_bins")]
    pub bins: u32,
}

fn default_bins() -> u32 {
    come_core::boxcodec::DEFAULT_BINS
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    #[serde(default)]
    pub discard_ratio: f64,
    #[serde(default = "default_true")]
    pub renormalize: bool,
    #[serde(default)]
    pub mode: RolloutModeCfg,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutModeCfg {
    PerLayer,
    #[default]
    Chained,
}

impl RolloutSection {
    pub fn to_config(&self) -> RolloutConfig {
        RolloutConfig {
            discard_ratio: self.discard_ratio,
            renormalize_rows: self.renormalize,
            mode: match self.mode {
                RolloutModeCfg::PerLayer => RolloutMode::PerLayer,
                RolloutModeCfg::Chained => RolloutMode::Chained,
            },
            residual_mix: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn encoder(&self, name: &str) -> CliResult<&EncoderSection> {
        match name {
            "query" => self.encoders.query.as_ref(),
            "context" => self.encoders.context.as_ref(),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown encoder {other:?}; expected \"query\" or \"context\""
                )))
            }
        }
        .ok_or_else(|| CliError::Usage(format!("config has no \"{name}\" encoder section")))
    }

    /// The only encoder present, or an error asking for --encoder.
    pub fn sole_encoder_name(&self) -> CliResult<&'static str> {
        match (&self.encoders.query, &self.encoders.context) {
            (Some(_), None) => Ok("query"),
            (None, Some(_)) => Ok("context"),
            (Some(_), Some(_)) => Err(CliError::Usage(
                "config defines both encoders; pass --encoder query|context".into(),
            )),
            (None, None) => Err(CliError::Usage("config defines no encoders".into())),
        }
    }
}

/// Minimal glob: `*` matches any run of characters within the final path
/// component. Matches are returned sorted.
pub fn expand_pattern(pattern: &str) -> CliResult<Vec<PathBuf>> {
    let path = Path::new(pattern);
    let file_pat = path
        .file_name()
        .and_then(|f| f.to_str())
        .ok_or_else(|| CliError::Usage(format!("bad path pattern {pattern:?}")))?;
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    if parent.to_string_lossy().contains('*') {
        return Err(CliError::Usage(format!(
            "pattern {pattern:?}: wildcards are only supported in the file name"
        )));
    }
    if !file_pat.contains('*') {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(&parent)
        .map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    let mut matches = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if wildcard_match(file_pat, name) {
            matches.push(entry.path());
        }
    }
    matches.sort();
    if matches.is_empty() {
        return Err(CliError::Io(format!("pattern {pattern:?} matched no files")));
    }
    Ok(matches)
}

fn wildcard_match(pattern: &str, name: &str) -> bool {
    // Greedy segment matching: split on '*', anchor first and last segments.
    let segments: Vec<&str> = pattern.split('*').collect();
    if segments.len() == 1 {
        return pattern == name;
    }
    let mut rest = name;
    for (i, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            continue;
        }
        if i == 0 {
            match rest.strip_prefix(seg) {
                Some(r) => rest = r,
                None => return false,
            }
        } else if i == segments.len() - 1 {
            return rest.ends_with(seg);
        } else {
            match rest.find(seg) {
                Some(at) => rest = &rest[at + seg.len()..],
                None => return false,
            }
        }
    }
    true
}

pub fn read_tensor(path: &Path) -> CliResult<Tensor> {
    cmvt::read_file(path).map_err(|e| with_path(e, path))
}

pub fn write_tensor(tensor: &Tensor, path: &Path) -> CliResult<()> {
    cmvt::write_file(tensor, path).map_err(|e| with_path(e, path))
}

/// Loads an encoder's stack: layer files (sorted), optional attention files,
/// and layer indices.
pub fn load_stack(name: &str, section: &EncoderSection) -> CliResult<LayerStack> {
    let layer_paths = expand_pattern(&section.layers)?;
    let mut grids = Vec::with_capacity(layer_paths.len());
    for path in &layer_paths {
        let tokens = read_tensor(path)?;
        let grid = TokenGrid::new(section.rows, section.cols, tokens, section.class_token)
            .map_err(|e| with_path(e, path))?;
        grids.push(grid);
    }
    let indices = match &section.layer_indices {
        Some(idx) => {
            if idx.len() != grids.len() {
                return Err(CliError::Usage(format!(
                    "encoder {name}: {} layer_indices for {} layer files",
                    idx.len(),
                    grids.len()
                )));
            }
            idx.clone()
        }
        None => (1..=grids.len()).collect(),
    };
    let attn = match &section.attention {
        Some(pattern) => {
            let tensors = load_attention_tensors(pattern)?;
            if tensors.len() != grids.len() {
                return Err(CliError::Usage(format!(
                    "encoder {name}: {} attention layers for {} token layers",
                    tensors.len(),
                    grids.len()
                )));
            }
            Some(tensors)
        }
        None => None,
    };
    LayerStack::new(name, grids, indices, attn).map_err(CliError::from)
}

/// Attention input: either per-layer (heads, T, T) files or one stacked
/// (layers, heads, T, T) file, split into per-layer tensors.
pub fn load_attention_tensors(pattern: &str) -> CliResult<Vec<Tensor>> {
    let paths = expand_pattern(pattern)?;
    if paths.len() == 1 {
        let tensor = read_tensor(&paths[0])?;
        if let [layers, heads, r, c] = *tensor.shape() {
            let per_layer = heads * r * c;
            return (0..layers)
                .map(|l| {
                    Tensor::new(
                        vec![heads, r, c],
                        tensor.data()[l * per_layer..(l + 1) * per_layer].to_vec(),
                    )
                    .map_err(CliError::from)
                })
                .collect();
        }
        return Ok(vec![tensor]);
    }
    paths.iter().map(|p| read_tensor(p)).collect()
}

/// Resolves the layer selection for one encoder: explicit indices if given,
/// else a quantile band over the entropy profile, else every layer.
pub fn resolve_selection(
    name: &str,
    section: &EncoderSection,
    stack: &LayerStack,
) -> CliResult<LayerSelection> {
    match &section.select {
        Some(SelectSection { indices: Some(idx), band: None }) => {
            LayerSelection::explicit(name, idx.clone()).map_err(CliError::from)
        }
        Some(SelectSection { indices: None, band: Some((q_lo, q_hi)) }) => {
            let profile = entropy_profile(stack, section.entropy_source.into())?;
            select_layers(name, &profile, *q_lo, *q_hi).map_err(CliError::from)
        }
        Some(SelectSection { indices: Some(_), band: Some(_) }) => Err(CliError::Usage(format!(
            "encoder {name}: select gives both indices and band; pick one"
        ))),
        Some(SelectSection { indices: None, band: None }) | None => {
            LayerSelection::explicit(name, stack.layer_indices().to_vec()).map_err(CliError::from)
        }
    }
}

/// Builds the per-encoder pipeline: selection, mixing weights, and one
/// orthogonal layer per selected layer.
pub fn build_pipeline(
    name: &str,
    section: &EncoderSection,
    stack: &LayerStack,
    ol: Option<&OlSection>,
    logits: Option<&Vec<f64>>,
    param_files: Option<&Vec<PathBuf>>,
) -> CliResult<EncoderPipeline<f64>> {
    let selection = resolve_selection(name, section, stack)?;
    let k = selection.selected.len();
    let weights = match logits {
        Some(l) => MixingWeights::for_selection(l, &selection)?,
        None => MixingWeights::uniform(k)?,
    };
    let d_in = stack.layers()[0].dim();
    let method = ol.map_or(OrthoMethod::Cayley, |s| s.method);
    let d_out = ol.and_then(|s| s.d_out).unwrap_or(d_in);
    let ols: Vec<OrthoLayer> = match param_files {
        Some(files) => {
            if files.len() != k {
                return Err(CliError::Usage(format!(
                    "encoder {name}: {} orthogonal-layer files for {k} selected layers",
                    files.len()
                )));
            }
            let mut out = Vec::with_capacity(k);
            for cmvt_path in files {
                let sidecar = cmvt_path.with_extension("json");
                let layer =
                    OrthoLayer::load(cmvt_path, &sidecar).map_err(|e| with_path(e, cmvt_path))?;
                if layer.d_in() != d_in || layer.d_out() != d_out {
                    return Err(CliError::Numeric(format!(
                        "{}: orthogonal layer is {}x{}, pipeline needs {d_out}x{d_in}",
                        cmvt_path.display(),
                        layer.d_out(),
                        layer.d_in()
                    )));
                }
                out.push(layer);
            }
            out
        }
        None => (0..k)
            .map(|_| OrthoLayer::zero(d_in, d_out, method))
            .collect::<Result<_, _>>()?,
    };
    Ok(EncoderPipeline {
        selection,
        weights,
        ols,
    })
}

/// Loads the fusion weights named by the section from its weights directory.
pub fn load_fusion_params(section: &FusionSection) -> CliResult<FusionParams> {
    let dir = &section.weights_dir;
    let w_q = read_tensor(&dir.join("W_Q.cmvt"))?;
    let w_k = read_tensor(&dir.join("W_K.cmvt"))?;
    let w_v = read_tensor(&dir.join("W_V.cmvt"))?;
    let w_out = read_tensor(&dir.join("W_out.cmvt"))?;
    FusionParams::new(
        w_q,
        w_k,
        w_v,
        w_out,
        section.heads,
        section.d_h,
        section.gamma,
        section.rope_base,
        section.rope_scale,
    )
    .map_err(CliError::from)
}

pub fn load_projection(
    section: Option<&ProjectionSection>,
    fusion: Option<&FusionSection>,
) -> CliResult<Projection> {
    match section {
        None | Some(ProjectionSection::Identity) => Ok(Projection::Identity),
        Some(ProjectionSection::Linear { file }) => {
            let path = match (file, fusion) {
                (Some(f), _) => f.clone(),
                (None, Some(fu)) => fu.weights_dir.join("W_proj.cmvt"),
                (None, None) => {
                    return Err(CliError::Usage(
                        "linear projection needs a file or a fusion weights_dir".into(),
                    ))
                }
            };
            Ok(Projection::Linear(read_tensor(&path)?))
        }
        Some(ProjectionSection::Mlp { hidden, output }) => Ok(Projection::Mlp {
            hidden: read_tensor(hidden)?,
            output: read_tensor(output)?,
        }),
    }
}

/// Loads the per-layer attention tensors of an encoder as rollout inputs.
pub fn load_attn_layers(name: &str, section: &EncoderSection) -> CliResult<Vec<AttnLayer>> {
    let pattern = section.attention.as_ref().ok_or_else(|| {
        CliError::Usage(format!("encoder {name}: no attention files configured"))
    })?;
    load_attention_tensors(pattern)?
        .iter()
        .map(|t| {
            AttnLayer::from_stacked(t)
                .map_err(|e| with_path(e, std::path::Path::new(pattern)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wildcard_basics() {
        assert!(wildcard_match("layer_*.cmvt", "layer_001.cmvt"));
        assert!(wildcard_match("*", "anything"));
        assert!(wildcard_match("a*b*c", "aXbYc"));
        assert!(!wildcard_match("layer_*.cmvt", "attn_001.cmvt"));
        assert!(!wildcard_match("a*b", "a"));
        assert!(wildcard_match("exact.cmvt", "exact.cmvt"));
        assert!(!wildcard_match("exact.cmvt", "exactXcmvt"));
    }

    #[test]
    fn unknown_keys_are_named() {
        let json = r#"{ "seed": 0, "encoders": {}, "bogus_key": 1 }"#;
        let err = serde_json::from_str::<RunConfig>(json).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn minimal_config_parses() {
        let json = r#"{
            "encoders": {
                "query": { "layers": "q/layer_*.cmvt", "rows": 4, "cols": 4 }
            }
        }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.seed, 0);
        assert!(cfg.encoders.query.is_some());
        assert_eq!(cfg.sole_encoder_name().unwrap(), "query");
    }
}
