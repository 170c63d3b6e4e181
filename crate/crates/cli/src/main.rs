//! `molscale`: scaffold sampling, pretraining, validation, scaling-law
//! fitting and gradient checks from the command line.
//!
//! Exit status: 0 success, 2 bad usage or input, 3 not enough data,
//! 4 numerical failure.

mod commands;
mod error;
mod manifest;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "molscale",
    version,
    about = "Two-track molecular pretraining at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write a synthetic molecule dataset (JSONL) and its scaffold table.
    Synth {
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        scaffolds: usize,
        #[arg(long, default_value_t = 4)]
        min_atoms: usize,
        #[arg(long, default_value_t = 12)]
        max_atoms: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Scaffold table path; defaults to the dataset path with a .tsv extension.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Draw molecule ids through temperature-scaled scaffold sampling.
    Sample {
        #[arg(long)]
        scaffolds: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also export per-scaffold probabilities as JSON.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Train from a config file; writes the loss log, checkpoints and a manifest into DIR.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print the losses of a checkpoint on a dataset as JSON.
    Validate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Run config the checkpoint must agree with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinate noise standard deviation.
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        #[arg(long, default_value_t = 0.15)]
        mask_rate: f64,
        #[arg(long, default_value_t = 512)]
        token_budget: usize,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Fit the three-term power law to one or more loss logs.
    FitScaling {
        #[arg(long, num_args = 1.., required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        params_millions: Vec<f64>,
        #[arg(long, default_value_t = 200_000)]
        min_step: u64,
        #[arg(long, default_value_t = 10_000)]
        stride: u64,
        #[arg(long)]
        out: PathBuf,
        /// `step,actual,predicted` CSV; defaults to `<out stem>.predictions.csv`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Evaluate a fitted law at one model size and step count.
    PredictLoss {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        params_millions: f64,
        #[arg(long)]
        steps: f64,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Fit-quality metrics between two files of one number per line.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        actual: PathBuf,
        /// Use only the last N values of each file.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference checks of every primitive and of a model preset.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
