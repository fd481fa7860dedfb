//! `spikegrad`: train, evaluate and diagnose spiking networks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ScheduleKind, Setting, SynthKind};
use spikegrad::snn::ResetMode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("gamma search did not converge: {0}")]
    Tuner(String),
    #[error(transparent)]
    Library(#[from] spikegrad::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Tuner(_) => 4,
            CliError::Library(spikegrad::Error::Io { .. }) => 2,
            CliError::Library(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "spikegrad", version, about = "Surrogate-gradient training of spiking neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write manifest, metrics and checkpoint.
    Train(TrainArgs),
    /// Report accuracy of a checkpoint, optionally over a range of timesteps.
    Eval(EvalArgs),
    /// Search the surrogate width that balances gradients across depth.
    TuneGamma(TuneArgs),
    /// Write per-layer gradient profiles for a list of surrogate widths.
    DiagGrad(DiagArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory holding the four standard MNIST IDX files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub train_images: Option<PathBuf>,
    #[arg(long)]
    pub train_labels: Option<PathBuf>,
    #[arg(long)]
    pub test_images: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    /// Generate a synthetic dataset instead of reading files.
    #[arg(long, value_enum)]
    pub synthetic: Option<SynthKind>,
    #[arg(long, default_value_t = 1000)]
    pub synthetic_train: usize,
    #[arg(long, default_value_t = 200)]
    pub synthetic_test: usize,
    #[arg(long, default_value_t = 10)]
    pub synthetic_classes: usize,
    /// Feature count (clusters) or image side (patterns).
    #[arg(long)]
    pub synthetic_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Use only the first N training samples.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    pub test_limit: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Architecture name (mnist-2conv, scaling-{3,4,5,9,13}, deep16) or a
    /// JSON network description.
    #[arg(long, default_value = "mnist-2conv")]
    pub arch: String,
    #[arg(long, default_value_t = 10)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run without batch norm; thresholds are calibrated on training data.
    #[arg(long)]
    pub no_batchnorm: bool,
    #[arg(long, default_value = "soft")]
    pub reset: ResetMode,
    /// Dropout before the last layer (mnist-2conv).
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
}

#[derive(Args, Debug, Clone)]
pub struct BracketArgs {
    #[arg(long, default_value_t = 1.0)]
    pub gamma_lo: f64,
    #[arg(long, default_value_t = 100.0)]
    pub gamma_hi: f64,
    /// Accept once |log2 R| is at most this.
    #[arg(long, default_value_t = 0.5)]
    pub tol: f64,
    #[arg(long, default_value_t = 20)]
    pub max_iter: usize,
    /// Batches used for each gradient profile.
    #[arg(long, default_value_t = 8)]
    pub profile_batches: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Rerun the configuration stored in a previous run's manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub bracket: BracketArgs,
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    /// Surrogate width, or `auto` to tune it before training.
    #[arg(long, default_value = "auto")]
    pub gamma: Setting,
    /// Peak learning rate, or `auto` for a range test.
    #[arg(long, default_value = "0.001")]
    pub max_lr: Setting,
    #[arg(long, value_enum, default_value = "one-cycle")]
    pub schedule: ScheduleKind,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Training samples used for threshold calibration without batch norm.
    #[arg(long, default_value_t = 1000)]
    pub calib_samples: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 100)]
    pub range_test_steps: usize,
    #[arg(long, default_value = "runs/latest")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Defaults to the training timesteps stored in the checkpoint.
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// `lo:hi:step` range of timesteps to evaluate, written as CSV.
    #[arg(long)]
    pub sweep_timesteps: Option<String>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Where to write the sweep CSV (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub bracket: BracketArgs,
    #[arg(long, default_value = "runs/tune")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiagArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated surrogate widths.
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    pub gamma: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    pub profile_batches: usize,
    #[arg(long, default_value = "runs/diag")]
    pub out_dir: PathBuf,
}

fn init_threads() {
    if let Ok(text) = std::env::var("SPIKEGRAD_THREADS") {
        match text.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size thread pool: {e}");
                }
            }
            _ => log::warn!("ignoring SPIKEGRAD_THREADS={text:?}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    init_threads();
    let result = match cli.command {
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::TuneGamma(args) => commands::tune_gamma(args),
        Command::DiagGrad(args) => commands::diag_grad(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
