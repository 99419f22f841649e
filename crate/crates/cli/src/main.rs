//! `riskadj`: generate synthetic claims, fit risk models, evaluate them and
//! compare their hospital effects.

mod bundle;
mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use bundle::ModelFlag;
use commands::{ConfigArgs, Part, Preset};
use error::{exit_code, CliError, EXIT_OK};

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (config schema 1)");

#[derive(Parser)]
#[command(name = "riskadj", version = VERSION, about = "Risk-adjusted hospital performance estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigOpts {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set training.max_epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for every random stream of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ConfigOpts {
    fn view(&self) -> ConfigArgs<'_> {
        ConfigArgs { path: self.config.as_deref(), sets: &self.sets, seed: self.seed }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (CSV plus `.meta.json` sidecar).
    Generate {
        #[command(flatten)]
        config: ConfigOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one model and write `best.ckpt`, `log.jsonl` and `split.csv`.
    Train {
        #[command(flatten)]
        config: ConfigOpts,
        #[arg(long, value_enum)]
        model: ModelFlag,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Search the configured grid and keep the best validation ROC-AUC.
        #[arg(long)]
        grid: bool,
    },
    /// Score a checkpoint on one part of the split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        part: Part,
        #[arg(long)]
        per_cohort: bool,
        /// Defaults to `eval/` next to the checkpoint.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare the hospital effects of two checkpoints.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = commands::HISTOGRAM_BINS)]
        bins: usize,
    },
    /// Generate, fit every model and report recovery of the planted effects.
    Experiment {
        #[command(flatten)]
        config: ConfigOpts,
        /// Ignored when `--config` is given.
        #[arg(long, value_enum, default_value = "nonlinear")]
        preset: Preset,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        #[command(flatten)]
        config: ConfigOpts,
        #[arg(long, value_enum, default_value = "nn")]
        model: ModelFlag,
    },
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("RISKADJ_THREADS") else { return Ok(()) };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("RISKADJ_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Generate { config, out } => commands::cmd_generate(config.view(), &out),
        Command::Train { config, model, dataset, out_dir, grid } => {
            commands::cmd_train(config.view(), model, &dataset, &out_dir, grid)
        }
        Command::Evaluate { checkpoint, dataset, part, per_cohort, out_dir } => {
            let out_dir = out_dir.unwrap_or_else(|| commands::default_eval_dir(&checkpoint));
            commands::cmd_evaluate(&checkpoint, &dataset, part, per_cohort, &out_dir)
        }
        Command::Compare { a, b, dataset, out_dir, bins } => commands::cmd_compare(&a, &b, &dataset, &out_dir, bins),
        Command::Experiment { config, preset, out_dir } => commands::cmd_experiment(config.view(), preset, &out_dir),
        Command::GradCheck { config, model } => commands::cmd_grad_check(config.view(), model),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
