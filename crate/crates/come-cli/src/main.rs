//! `come`: command-line front end for the token fusion connector.
//!
//! Subcommands: entropy, select, fuse, rollout, box encode, box decode,
//! gradcheck, cost, synth. Exit codes: 0 ok, 1 usage, 2 I/O, 3 numeric.
//! `COME_THREADS` caps internal parallelism (default: all cores); results
//! are byte-identical at any thread count.

mod commands;
mod config;
mod errors;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Ctx;
use errors::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "come", version, about = "Multi-encoder token fusion connector pipelines")]
struct Cli {
    /// Run configuration (strict JSON; unknown keys abort).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override for seeded commands.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output path (file or directory, command-dependent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Suppress informational output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the per-layer spatial entropy profile as CSV.
    Entropy {
        /// Which encoder section to profile ("query" or "context").
        #[arg(long)]
        encoder: Option<String>,
    },
    /// Resolve and print the layer selection for an encoder.
    Select {
        #[arg(long)]
        encoder: Option<String>,
    },
    /// Run the full connector and write the fused token tensor.
    Fuse {
        /// Also write aggregate_query.cmvt / aggregate_context.cmvt.
        #[arg(long)]
        emit_aggregates: bool,
    },
    /// Attention rollout heatmaps as ASCII PGM files.
    Rollout {
        #[arg(long)]
        encoder: Option<String>,
        /// Layer index to target, or "all".
        #[arg(long, default_value = "all")]
        layer: String,
    },
    /// Bounding-box coordinate-token codec.
    #[command(name = "box")]
    BoxCodec(BoxArgs),
    /// Run the analytic-vs-finite-difference gradient suite; nonzero exit on
    /// any failing check.
    Gradcheck {
        /// Finite-difference step (default 1e-5).
        #[arg(long)]
        step: Option<f64>,
    },
    /// Attention cost of concatenation vs cross-attention fusion.
    Cost { n_text: u64, n_vis: u64 },
    /// Generate a seeded synthetic encoder stack (and optional fusion
    /// weights) from a generator spec.
    Synth,
}

#[derive(Args)]
struct BoxArgs {
    #[command(subcommand)]
    op: BoxOp,
}

#[derive(Subcommand)]
enum BoxOp {
    /// "x1 y1 x2 y2 W H" -> token line.
    Encode {
        /// Coordinate vocabulary size (default 1000, or config box.bins).
        #[arg(long)]
        bins: Option<u32>,
        /// Inline input; reads stdin lines when omitted.
        #[arg(trailing_var_arg = true)]
        input: Vec<String>,
    },
    /// Token line plus "W H" -> "x1 y1 x2 y2".
    Decode {
        #[arg(long)]
        bins: Option<u32>,
        #[arg(trailing_var_arg = true)]
        input: Vec<String>,
    },
}

fn configure_threads() -> CliResult<()> {
    if let Ok(raw) = std::env::var("COME_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| CliError::Usage(format!("COME_THREADS={raw:?} is not a thread count")))?;
        if n == 0 {
            return Err(CliError::Usage("COME_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let ctx = Ctx {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        quiet: cli.quiet,
    };
    match &cli.command {
        Command::Entropy { encoder } => commands::cmd_entropy(&ctx, encoder),
        Command::Select { encoder } => commands::cmd_select(&ctx, encoder),
        Command::Fuse { emit_aggregates } => commands::cmd_fuse(&ctx, *emit_aggregates),
        Command::Rollout { encoder, layer } => commands::cmd_rollout(&ctx, encoder, layer),
        Command::BoxCodec(args) => match &args.op {
            BoxOp::Encode { bins, input } => commands::cmd_box_encode(&ctx, *bins, input),
            BoxOp::Decode { bins, input } => commands::cmd_box_decode(&ctx, *bins, input),
        },
        Command::Gradcheck { step } => commands::cmd_gradcheck(&ctx, *step),
        Command::Cost { n_text, n_vis } => commands::cmd_cost(*n_text, *n_vis),
        Command::Synth => commands::cmd_synth(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("come: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
