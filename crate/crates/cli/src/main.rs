//! `nopelab`: dataset generation, training, ablation grids, invariance
//! checks and correlation analysis from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nopelab::LabError;

#[derive(Parser, Debug)]
#[command(name = "nopelab", version, about = "Desk-scale transformer laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate disjoint train/test addition datasets.
    GenData(GenDataArgs),
    /// Train one model and write a checkpoint plus reports.
    Train(TrainArgs),
    /// Train every cell of an ablation grid and tabulate accuracies.
    Grid(GridArgs),
    /// Measure permutation invariance of a checkpoint or a fresh model.
    CheckInvariance(InvarianceArgs),
    /// Activation correlation matrix of one layer: CSV, heatmap, metrics.
    Correlate(CorrelateArgs),
    /// Exact-match accuracy of a checkpoint on the test split.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 10_000)]
    train: usize,
    #[arg(long, default_value_t = 1_000)]
    test: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Options that build an experiment config from a file plus overrides.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Disable positional encodings.
    #[arg(long)]
    nope: bool,
    /// Disable the causal attention mask.
    #[arg(long)]
    non_causal: bool,
    /// Comma-separated 1-based layers whose residual connections are removed.
    #[arg(long, value_name = "LAYERS")]
    ablate: Option<String>,
    /// Override the number of training iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Override the batch size.
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Model-initialisation and batch-sampling seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory with train.txt/test.txt; generated from the config otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue training from a checkpoint (its config is used as is).
    #[arg(long, conflicts_with_all = ["config", "nope", "non_causal", "ablate", "iters", "batch"])]
    resume: Option<PathBuf>,
    /// Also write the checkpoint every N iterations.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    quiet: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Semicolon-separated layer sets, e.g. "none;1;2;1,2".
    #[arg(long, default_value = "none")]
    layer_sets: String,
    /// Comma-separated variants: pe, nope.
    #[arg(long, default_value = "pe,nope")]
    variants: String,
    /// Seeds per cell (seeds 1..=N).
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Skip runs whose completion marker already exists.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    quiet: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InvarianceArgs {
    /// Checkpoint to test; without it a freshly initialised model is used.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Seed for the fresh model and for sampling sequences/permutations.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    perms: usize,
    /// Length of the random token sequences.
    #[arg(long, default_value_t = 9)]
    prompt_len: usize,
    /// Also decode this many test problems with shuffled operand digits.
    #[arg(long, default_value_t = 0)]
    decode: usize,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum TapArg {
    Block,
    Normalized,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PositionsArg {
    Full,
    Prompt,
}

#[derive(Args, Debug)]
struct CorrelateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// 1-based block index.
    #[arg(long, default_value_t = 1)]
    layer: usize,
    #[arg(long, value_enum, default_value_t = TapArg::Block)]
    tap: TapArg,
    #[arg(long, value_enum, default_value_t = PositionsArg::Full)]
    positions: PositionsArg,
    /// Use only the first N test problems.
    #[arg(long)]
    samples: Option<usize>,
    /// Write a header row of feature labels into the CSV.
    #[arg(long)]
    csv_header: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Lab(#[from] LabError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lab(LabError::Config(_) | LabError::Capacity { .. }) => 2,
            CliError::Lab(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Grid(a) => commands::grid(a),
        Command::CheckInvariance(a) => commands::check_invariance(a),
        Command::Correlate(a) => commands::correlate(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
