//! `pdcnn`: generate data, train, evaluate, search architectures and emit
//! diagnostics. Exit codes: 0 success, 1 runtime or data error, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<pdcnn_core::Error> for CliError {
    fn from(e: pdcnn_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "pdcnn", version, about = "Paralleled deep CNN training engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic two-class dataset (PDT1 images plus manifest.csv).
    Gendata(GendataArgs),
    /// Split a manifest, train a network, and write curve.csv, model.bin, report.txt
    /// and (without --rotate) the train.csv/test.csv split manifests.
    Train(TrainArgs),
    /// Print the error rate of a saved model on a manifest.
    Eval(EvalArgs),
    /// Greedy branch-by-branch architecture search.
    Search(SearchArgs),
    /// Filter-variance, convergence-epoch and convergence-time reports.
    Diag(DiagArgs),
}

#[derive(Args, Debug)]
struct GendataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_per_class: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.3)]
    difficulty: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Options shared by commands that read a `RunConfig`.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// key=value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value architecture file (depths, variants, filters, strides, ...).
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Architecture defaults: `full` (224 crops) or `desk` (56 crops, narrow).
    #[arg(long)]
    preset: Option<String>,
    /// Seeds the split, initialisation, shuffling and augmentation (default 1).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct OptimArgs {
    /// Maximum epochs (default 100).
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate (default 0.01), cut 10x after 20 epochs without a better test error.
    #[arg(long)]
    lr: Option<f64>,
    /// Default 0.9.
    #[arg(long)]
    momentum: Option<f64>,
    /// L2 penalty on weights, not biases (default 0.0005).
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Default 32; the last partial batch is kept.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Quadruple the dataset with 90/180/270 degree rotations before splitting.
    #[arg(long)]
    rotate: bool,
    /// Patch side; defaults to S - S/8 for S x S images.
    #[arg(long)]
    crop: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// CSV with header path,label,category pointing at PDT1 images.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Branch depths, e.g. `4` or `4,3,4`.
    #[arg(long)]
    depths: Option<String>,
    /// Kernel variant per branch; defaults to counting repeats of each depth.
    #[arg(long)]
    variants: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record real seconds per epoch in curve.csv (makes it non-reproducible).
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// `depths,error` CSV to replay instead of training.
    #[arg(long, conflicts_with = "manifest")]
    replay: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    max_branches: Option<usize>,
    /// Candidate depths tried each round.
    #[arg(long)]
    candidates: Option<String>,
    #[arg(long)]
    min_improvement: Option<f64>,
    /// Directory for search.csv (default: current directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagArgs {
    /// model.bin for the first-layer filter variance report.
    #[arg(long)]
    model: Option<PathBuf>,
    /// curve.csv for convergence-epoch detection.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// `t,n,e`: seconds per batch, batches per epoch, epochs.
    #[arg(long)]
    time: Option<String>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Directory for the CSV reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gendata(a) => commands::gendata(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Search(a) => commands::search(a),
        Command::Diag(a) => commands::diag(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
