//! `mtnet`: generate synthetic data, train, grid-search, evaluate and predict.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 data or ingestion,
//! 4 divergence, 5 I/O.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mtnet", version, about = "Multi-task lesion segmentation and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset in BUSI layout.
    Generate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples; classes are drawn uniformly.
        #[arg(long)]
        n: usize,
        /// Image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model and write checkpoints, history and a run manifest.
    Train {
        /// Dataset root in BUSI layout.
        #[arg(long)]
        data: PathBuf,
        /// `key = value` config file; unset keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for checkpoints, history and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Segmentation weight; overrides `train.lambda`.
        #[arg(long)]
        lambda: Option<f64>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model per task weight and compare them.
    Gridsearch {
        /// Dataset root in BUSI layout.
        #[arg(long)]
        data: PathBuf,
        /// `key = value` config file; unset keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for `grid.csv` and one subdirectory per weight.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated task weights; defaults to 0.1,0.2,...,0.9.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Parallel training runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval {
        /// Dataset root in BUSI layout.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for `metrics.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Split, threshold and batch settings; the network comes from the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Predict the mask and class of one image.
    Predict {
        /// Image file (PNG).
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for `mask.png` and `prediction.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a training or grid-search run from its manifest.
    Replay {
        /// `manifest.json` of an earlier run.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for the repeated run.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { out, n, size, seed, force } => commands::generate(&out, n, size, seed, force),
        Command::Train { data, config, out, lambda, seed } => {
            commands::train(&data, config.as_deref(), &out, lambda, seed)
        }
        Command::Gridsearch { data, config, out, lambdas, seed, jobs } => {
            commands::gridsearch(&data, config.as_deref(), &out, lambdas, seed, jobs)
        }
        Command::Eval { data, checkpoint, out, config } => commands::eval(&data, &checkpoint, &out, config.as_deref()),
        Command::Predict { image, checkpoint, out } => commands::predict(&image, &checkpoint, &out),
        Command::Replay { manifest, out } => commands::replay(&manifest, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
