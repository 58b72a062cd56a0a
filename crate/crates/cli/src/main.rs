mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::Outcome;
use config::{Mode, Overrides, RunConfig};

/// Streaming video transformer with dilated temporal reference attention.
///
/// Machine-readable results go to stdout as JSON lines, the first of which
/// is the effective configuration. Tables go to stderr.
#[derive(Parser, Debug)]
#[command(name = "tdvit", version)]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Inference streaming mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Output file, or output directory for `train`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model variant T, S, B or L.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Divide widths by this factor.
    #[arg(long, global = true)]
    toy_scale: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference gradient checks for every differentiable op and block.
    Gradcheck {
        /// Perturb the analytic gradient of this case.
        #[arg(long)]
        corrupt: Option<String>,
        #[arg(long, requires = "corrupt")]
        corrupt_by: Option<f64>,
    },
    /// Closed-form and measured temporal receptive fields.
    Trf,
    /// Reuse against refresh-every-frame: outputs, projection counts and MACs.
    Bench {
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train the temporal model and its space-only twin over several seeds.
    Train {
        /// Number of paired seeds.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Evaluate saved checkpoints.
    Eval {
        /// Directory written by `train`.
        dir: PathBuf,
        /// Dataset file from `generate`; defaults to each checkpoint's test set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write a synthetic dataset file.
    Generate {
        #[arg(long, default_value_t = 32)]
        videos: usize,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TDVIT_THREADS") {
        let n: usize = v.parse().with_context(|| format!("TDVIT_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Outcome> {
    init_threads()?;
    let overrides = Overrides {
        seed: cli.seed,
        mode: cli.mode,
        variant: cli.variant,
        toy_scale: cli.toy_scale,
    };
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let out = cli.out;
    match cli.command {
        Command::Gradcheck { corrupt, corrupt_by } => {
            if corrupt.is_some() {
                cfg.gradcheck.corrupt = corrupt;
                cfg.gradcheck.corrupt_by = corrupt_by;
            }
            commands::gradcheck(&cfg, out)
        }
        Command::Trf => commands::trf(&cfg, out),
        Command::Bench { frames } => {
            if let Some(f) = frames {
                cfg.bench.frames = f;
            }
            commands::bench(&cfg, out)
        }
        Command::Train { seeds } => {
            if let Some(s) = seeds {
                anyhow::ensure!(s > 0, tdvit::Error::Usage("seeds must be at least 1".into()));
                cfg.seeds = s;
            }
            commands::train(&cfg, out)
        }
        Command::Eval { dir, data } => commands::eval(&cfg, &dir, data.as_deref(), out),
        Command::Generate { videos } => {
            let out = out.context("generate needs --out")?;
            commands::generate(&cfg, videos, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<tdvit::Error>(), Some(tdvit::Error::Diverged { .. })));
            ExitCode::from(if diverged { 1 } else { 2 })
        }
    }
}
