//! Subcommand implementations. Every command is deterministic given its
//! flags and seed; repeated runs produce byte-identical outputs.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use come_core::boxcodec::{decode_box, encode_box, BoundingBox, BoxTokenSeq, Frame};
use come_core::entropy::{entropy_profile, SelectionPolicy};
use come_core::fusion::{attention_cost, connector_forward};
use come_core::gradcheck::{gradcheck_suite_with_step, reports_to_csv, DEFAULT_FD_STEP};
use come_core::rollout::{class_heatmap, rollout, write_pgm};
use come_core::synth::{make_stack, write_stack, SynthSpec};
use come_core::{rng, Tensor};

use crate::config::{
    build_pipeline, load_attn_layers, load_fusion_params, load_projection, load_stack,
    write_tensor, RunConfig,
};
use crate::errors::{CliError, CliResult};

/// FNV-1a over file bytes; printed after artifacts so runs can be compared
/// at a glance.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub struct Ctx {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub quiet: bool,
}

impl Ctx {
    fn require_config(&self) -> CliResult<RunConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::Usage("this command needs --config PATH".into()))?;
        RunConfig::load(path)
    }

    fn say(&self, line: &str) {
        if !self.quiet {
            println!("{line}");
        }
    }
}

fn encoder_name<'a>(cfg: &'a RunConfig, flag: &'a Option<String>) -> CliResult<&'a str> {
    match flag {
        Some(name) => {
            cfg.encoder(name)?;
            Ok(name.as_str())
        }
        None => cfg.sole_encoder_name(),
    }
}

pub fn cmd_entropy(ctx: &Ctx, encoder: &Option<String>) -> CliResult<()> {
    let cfg = ctx.require_config()?;
    let name = encoder_name(&cfg, encoder)?;
    let section = cfg.encoder(name)?;
    let stack = load_stack(name, section)?;
    let profile = entropy_profile(&stack, section.entropy_source.into())?;
    let csv = profile.to_csv();
    match &ctx.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    if section.select.as_ref().is_some_and(|s| s.band.is_some()) {
        let selection = crate::config::resolve_selection(name, section, &stack)?;
        let list: Vec<String> = selection.selected.iter().map(|i| i.to_string()).collect();
        ctx.say(&format!("selected[{name}]: {}", list.join(",")));
    }
    Ok(())
}

pub fn cmd_select(ctx: &Ctx, encoder: &Option<String>) -> CliResult<()> {
    let cfg = ctx.require_config()?;
    let name = encoder_name(&cfg, encoder)?;
    let section = cfg.encoder(name)?;
    let stack = load_stack(name, section)?;
    let selection = crate::config::resolve_selection(name, section, &stack)?;
    let policy = match &selection.policy {
        SelectionPolicy::QuantileBand { q_lo, q_hi } => {
            serde_json::json!({ "quantile_band": { "q_lo": q_lo, "q_hi": q_hi } })
        }
        SelectionPolicy::Explicit => serde_json::json!("explicit"),
    };
    let doc = serde_json::json!({
        "encoder_id": selection.encoder_id,
        "selected": selection.selected,
        "policy": policy,
    });
    let text = format!("{}\n", serde_json::to_string_pretty(&doc).expect("json encode"));
    match &ctx.out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn cmd_fuse(ctx: &Ctx, emit_aggregates: bool) -> CliResult<()> {
    let cfg = ctx.require_config()?;
    let query_section = cfg.encoder("query")?;
    let context_section = cfg.encoder("context")?;
    let fusion_section = cfg
        .fusion
        .as_ref()
        .ok_or_else(|| CliError::Usage("fuse needs a \"fusion\" config section".into()))?;

    let query_stack = load_stack("query", query_section)?;
    let context_stack = load_stack("context", context_section)?;
    let ol = cfg.ol.as_ref();
    let query_pipe = build_pipeline(
        "query",
        query_section,
        &query_stack,
        ol,
        cfg.mixing.as_ref().and_then(|m| m.query_logits.as_ref()),
        ol.and_then(|s| s.query_params.as_ref()),
    )?;
    let context_pipe = build_pipeline(
        "context",
        context_section,
        &context_stack,
        ol,
        cfg.mixing.as_ref().and_then(|m| m.context_logits.as_ref()),
        ol.and_then(|s| s.context_params.as_ref()),
    )?;
    let params = load_fusion_params(fusion_section)?;
    let projection = load_projection(cfg.projection.as_ref(), cfg.fusion.as_ref())?;

    let output = connector_forward(
        &query_stack,
        &query_pipe,
        &context_stack,
        &context_pipe,
        &params,
        &projection,
        fusion_section.pool,
        1e-6,
    )?;

    let out_path = ctx.out.clone().unwrap_or_else(|| PathBuf::from("fused.cmvt"));
    write_tensor(&output.output, &out_path)?;
    if emit_aggregates {
        let dir = out_path.parent().unwrap_or_else(|| Path::new("."));
        write_tensor(output.v_query.tokens(), &dir.join("aggregate_query.cmvt"))?;
        write_tensor(output.v_context.tokens(), &dir.join("aggregate_context.cmvt"))?;
    }
    let bytes = std::fs::read(&out_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", out_path.display())))?;
    ctx.say(&format!(
        "fused shape: ({}, {})",
        output.output.nrows(),
        output.output.ncols()
    ));
    ctx.say(&format!("checksum: {:016x}", fnv1a64(&bytes)));
    Ok(())
}

pub fn cmd_rollout(ctx: &Ctx, encoder: &Option<String>, layer: &str) -> CliResult<()> {
    let cfg = ctx.require_config()?;
    let name = encoder_name(&cfg, encoder)?;
    let section = cfg.encoder(name)?;
    let layers = load_attn_layers(name, section)?;
    let rollout_cfg = cfg
        .rollout
        .as_ref()
        .map(|s| s.to_config())
        .unwrap_or_default();
    let indices: Vec<usize> = section
        .layer_indices
        .clone()
        .unwrap_or_else(|| (1..=layers.len()).collect());
    if indices.len() != layers.len() {
        return Err(CliError::Usage(format!(
            "encoder {name}: {} layer_indices for {} attention files",
            indices.len(),
            layers.len()
        )));
    }

    // Positions within the stack that we produce heatmaps for.
    let targets: Vec<usize> = if layer == "all" {
        match rollout_cfg.mode {
            come_core::rollout::RolloutMode::PerLayer => (0..layers.len()).collect(),
            come_core::rollout::RolloutMode::Chained => vec![layers.len() - 1],
        }
    } else {
        let idx: usize = layer
            .parse()
            .map_err(|_| CliError::Usage(format!("--layer must be an index or \"all\", got {layer:?}")))?;
        let pos = indices
            .iter()
            .position(|&i| i == idx)
            .ok_or_else(|| CliError::Usage(format!("layer index {idx} not in {indices:?}")))?;
        vec![pos]
    };

    let out_path = ctx.out.clone().unwrap_or_else(|| PathBuf::from("rollout.pgm"));
    for &pos in &targets {
        let matrix = rollout(&layers, &rollout_cfg, pos)?;
        let heat = class_heatmap(&matrix, section.rows, section.cols)?;
        let path = if targets.len() == 1 {
            out_path.clone()
        } else {
            let stem = out_path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("rollout");
            let ext = out_path.extension().and_then(|s| s.to_str()).unwrap_or("pgm");
            out_path.with_file_name(format!("{stem}_L{:03}.{ext}", indices[pos]))
        };
        let mut buf = Vec::new();
        write_pgm(&heat, &mut buf)?;
        std::fs::write(&path, &buf)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        ctx.say(&format!("wrote {}", path.display()));
    }
    Ok(())
}

fn box_bins(ctx: &Ctx, flag: Option<u32>) -> CliResult<u32> {
    if let Some(b) = flag {
        return Ok(b);
    }
    if let Some(path) = &ctx.config {
        let cfg = RunConfig::load(path)?;
        if let Some(section) = cfg.r#box {
            return Ok(section.bins);
        }
    }
    Ok(come_core::boxcodec::DEFAULT_BINS)
}

fn gather_lines(args: &[String]) -> CliResult<Vec<String>> {
    if !args.is_empty() {
        return Ok(vec![args.join(" ")]);
    }
    let stdin = std::io::stdin();
    let mut lines = Vec::new();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| CliError::Io(format!("stdin: {e}")))?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    if lines.is_empty() {
        return Err(CliError::Usage("no input given (args or stdin)".into()));
    }
    Ok(lines)
}

fn flush_output(ctx: &Ctx, out_lines: Vec<String>) -> CliResult<()> {
    let text = out_lines.join("\n") + "\n";
    match &ctx.out {
        Some(path) => write_text(path, &text),
        None => {
            print!("{text}");
            std::io::stdout().flush().ok();
            Ok(())
        }
    }
}

pub fn cmd_box_encode(ctx: &Ctx, bins_flag: Option<u32>, args: &[String]) -> CliResult<()> {
    let bins = box_bins(ctx, bins_flag)?;
    let mut out_lines = Vec::new();
    for line in gather_lines(args)? {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(CliError::Usage(format!(
                "encode expects \"x1 y1 x2 y2 W H\", got {} fields",
                fields.len()
            )));
        }
        let mut vals = [0.0f64; 6];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f.parse().map_err(|_| {
                CliError::Usage(format!("field {i} ({f:?}) is not a number"))
            })?;
        }
        let frame = Frame::new(vals[4], vals[5])?;
        let bbox = BoundingBox::new(vals[0], vals[1], vals[2], vals[3], frame)?;
        out_lines.push(encode_box(&bbox, bins)?.to_string());
    }
    flush_output(ctx, out_lines)
}

pub fn cmd_box_decode(ctx: &Ctx, bins_flag: Option<u32>, args: &[String]) -> CliResult<()> {
    let bins = box_bins(ctx, bins_flag)?;
    let mut out_lines = Vec::new();
    for line in gather_lines(args)? {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(CliError::Usage(format!(
                "decode expects 6 tokens plus \"W H\", got {} fields",
                fields.len()
            )));
        }
        let seq = BoxTokenSeq::from_tokens(&fields[..6], bins)?;
        let w: f64 = fields[6]
            .parse()
            .map_err(|_| CliError::Usage(format!("bad width {:?}", fields[6])))?;
        let h: f64 = fields[7]
            .parse()
            .map_err(|_| CliError::Usage(format!("bad height {:?}", fields[7])))?;
        let bbox = decode_box(&seq, Frame::new(w, h)?)?;
        out_lines.push(format!(
            "{:.4} {:.4} {:.4} {:.4}",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2
        ));
    }
    flush_output(ctx, out_lines)
}

pub fn cmd_gradcheck(ctx: &Ctx, step: Option<f64>) -> CliResult<()> {
    // --seed wins, then the config's seed, then 0.
    let seed = match (ctx.seed, &ctx.config) {
        (Some(s), _) => s,
        (None, Some(path)) => RunConfig::load(path)?.seed,
        (None, None) => 0,
    };
    let h = step.unwrap_or(DEFAULT_FD_STEP);
    if h <= 0.0 {
        return Err(CliError::Usage(format!("--step must be positive, got {h}")));
    }
    let reports = gradcheck_suite_with_step(seed, h);
    let csv = reports_to_csv(&reports);
    match &ctx.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    let failures: Vec<&come_core::gradcheck::GradReport> =
        reports.iter().filter(|r| !r.pass).collect();
    if failures.is_empty() {
        ctx.say(&format!("gradcheck: {} checks passed", reports.len()));
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradcheck: {} of {} checks failed (worst rel_err {:.3e})",
            failures.len(),
            reports.len(),
            failures
                .iter()
                .map(|r| r.rel_err)
                .fold(f64::MIN, f64::max)
        )))
    }
}

pub fn cmd_cost(n_text: u64, n_vis: u64) -> CliResult<()> {
    let (concat, cross, ratio) = attention_cost(n_text, n_vis)?;
    println!("{concat},{cross},{ratio:.4}");
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsSpec {
    /// Shared token width after aggregation.
    d: usize,
    heads: usize,
    d_h: usize,
    /// Projection output width (W_proj is d x d_llm).
    d_llm: usize,
    #[serde(default = "default_weight_scale")]
    scale: f64,
}

fn default_weight_scale() -> f64 {
    0.5
}

fn seeded_weight(shape: Vec<usize>, seed: u64, tag: u64, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| rng::range_f64(&[seed, 0x5745, tag, i as u64], -scale, scale))
        .collect();
    Tensor::new(shape, data).expect("seeded weight")
}

pub fn cmd_synth(ctx: &Ctx) -> CliResult<()> {
    let path = ctx
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("synth needs --config with a generator spec".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    // The optional "weights" section rides alongside the generator spec.
    let weights: Option<WeightsSpec> = match doc.as_object_mut() {
        Some(map) => map
            .remove("weights")
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| CliError::Usage(format!("{}: weights: {e}", path.display())))?,
        None => None,
    };
    let mut spec: SynthSpec = serde_json::from_value(doc)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Some(seed) = ctx.seed {
        spec.seed = seed;
    }
    let out_dir = ctx.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let stack = make_stack::<f64>(&spec)?;
    write_stack(&stack, &out_dir)?;
    ctx.say(&format!(
        "wrote {} layers ({}x{}, dim {}) to {}",
        spec.layers,
        spec.rows,
        spec.cols,
        spec.dim,
        out_dir.display()
    ));
    if let Some(w) = weights {
        let inner = w.heads * w.d_h;
        let files = [
            ("W_Q.cmvt", vec![w.d, inner], 1u64),
            ("W_K.cmvt", vec![w.d, inner], 2),
            ("W_V.cmvt", vec![w.d, inner], 3),
            ("W_out.cmvt", vec![inner, w.d], 4),
            ("W_proj.cmvt", vec![w.d, w.d_llm], 5),
        ];
        for (name, shape, tag) in files {
            let tensor = seeded_weight(shape, spec.seed, tag, w.scale);
            write_tensor(&tensor, &out_dir.join(name))?;
        }
        ctx.say(&format!("wrote fusion weights to {}", out_dir.display()));
    }
    Ok(())
}
