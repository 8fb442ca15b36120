//! `diln` — interest life-cycle ranking pipeline.
//!
//! Subcommands: `prepare-data`, `train`, `evaluate`, `gradcheck`. Exit codes:
//! 0 success, 1 usage/config error, 2 data error, 3 numeric failure.

mod commands;
mod runcfg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use diln_core::error::CoreError;
use diln_core::model::ModelVariant;

use commands::{cmd_evaluate, cmd_gradcheck, cmd_prepare, cmd_train};
use runcfg::RunConfig;

#[derive(Parser)]
#[command(
    name = "diln",
    version,
    about = "Interest life-cycle modeling for multi-task ranking: data preparation, training, evaluation, gradient checking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Flat key-value configuration file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for data preparation (training is single-threaded for
    /// bit reproducibility).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset cache from a behavior log or the synthetic generator.
    #[command(name = "prepare-data")]
    PrepareData {
        #[command(flatten)]
        common: CommonOpts,
        /// Generate a synthetic four-phase dataset instead of reading a log.
        #[arg(long)]
        synthetic: bool,
        /// Input log path.
        #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
        input: Option<PathBuf>,
        /// Log format: kuairand_csv or internal_tsv.
        #[arg(long, requires = "input")]
        format: Option<String>,
        /// Feature-window length in days.
        #[arg(long = "window-days")]
        window_days: Option<u32>,
        /// Output directory for the cache, manifest and config echo.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a prepared dataset cache.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Directory holding dataset.cache.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint, history and config echo.
        #[arg(long)]
        out: PathBuf,
        /// Model ablation: baseline, ilem or full.
        #[arg(long)]
        ablation: Option<String>,
        /// Epoch count override (0 saves an untrained checkpoint).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a dataset with a checkpoint and write metric reports.
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "report-dir")]
        report_dir: PathBuf,
    },
    /// Finite-difference check of the full training loss.
    Gradcheck {
        #[command(flatten)]
        common: CommonOpts,
        /// Batch size for the check.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Maximum allowed relative error per parameter group.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Freeze parameter groups (repeatable): ilfm, ilem or a group name.
        #[arg(long)]
        freeze: Vec<String>,
    },
}

fn load_config(common: &CommonOpts) -> Result<RunConfig, CoreError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.synthetic.seed = seed;
    }
    if let Some(threads) = common.threads {
        if threads == 0 {
            return Err(CoreError::Config("threads must be at least 1".into()));
        }
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CoreError> {
    match cli.command {
        Command::PrepareData { common, synthetic, input, format, window_days, out } => {
            let cfg = load_config(&common)?;
            cmd_prepare(
                cfg,
                &commands::PrepareArgs { synthetic, input, format, window_days, out },
            )
        }
        Command::Train { common, data, out, ablation, epochs } => {
            let mut cfg = load_config(&common)?;
            if let Some(ablation) = ablation {
                cfg.train.model.variant = ModelVariant::parse(&ablation).ok_or_else(|| {
                    CoreError::Config(format!("ablation must be baseline, ilem or full, got {ablation}"))
                })?;
            }
            if let Some(epochs) = epochs {
                cfg.train.epochs = epochs;
            }
            cmd_train(cfg, &commands::TrainArgs { data, out })
        }
        Command::Evaluate { common, data, checkpoint, report_dir } => {
            let cfg = load_config(&common)?;
            cmd_evaluate(cfg, &commands::EvaluateArgs { data, checkpoint, report_dir })
        }
        Command::Gradcheck { common, samples, tolerance, freeze } => {
            let cfg = load_config(&common)?;
            cmd_gradcheck(cfg, &commands::GradcheckArgs { samples, tolerance, freeze })
        }
    }
}

fn exit_code(err: &CoreError) -> i32 {
    match err {
        CoreError::Config(_) => 1,
        CoreError::Data(_) | CoreError::Io(_) => 2,
        CoreError::Shape(_) | CoreError::Numeric(_) => 3,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
