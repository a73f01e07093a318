//! `embedforge` command-line tool.
//!
//! Exit codes: 0 success, 1 failed check, 2 configuration error,
//! 3 data or numeric-domain error, 4 training divergence.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use embedforge::error::{Error, ErrorKind};
use embedforge::losses::LossKind;

#[derive(Parser, Debug)]
#[command(name = "embedforge", version, about = "Train and evaluate identity embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved configuration as JSON.
    PrintConfig(PrintConfigArgs),
    /// Train an embedding network.
    Train(TrainArgs),
    /// Cluster a held-out identity stream with a trained network.
    #[command(alias = "evaluate-stream")]
    EvalStream(StreamArgs),
    /// Sweep clustering thresholds over a held-out stream.
    Sweep(SweepArgs),
    /// CMC and mAP with one query per identity.
    #[command(alias = "evaluate-rank")]
    EvalRank(RankArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write embeddings of a dataset split to CSV.
    Export(ExportArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Idx,
    Csv,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    /// Items withheld from training.
    Heldout,
    Train,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Desk-scale defaults.
    Default,
    /// Full-scale published hyperparameters.
    FullScale,
}

/// Configuration file plus overrides; flags win over the file.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// IDX image file (with `--dataset idx`).
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// IDX label file (with `--dataset idx`).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Feature CSV `label,x0,x1,…` (with `--dataset csv`).
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Keep at most this many IDX items per class.
    #[arg(long)]
    pub max_per_identity: Option<usize>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Training iterations; the learning rate decays over the second half.
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Identities per batch.
    #[arg(long)]
    pub p: Option<usize>,
    /// Items per identity in a batch.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug)]
struct PrintConfigArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Training seed (initialisation and batches).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Resume from a checkpoint with optimiser state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalInput {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "heldout")]
    pub split: SplitKind,
}

#[derive(Args, Debug)]
pub struct StreamArgs {
    #[command(flatten)]
    pub input: EvalInput,
    /// Squared-distance threshold for opening a new cluster.
    #[arg(long, conflicts_with = "sweep")]
    pub th: Option<f64>,
    /// Pick the threshold with the best final cluster quality.
    #[arg(long)]
    pub sweep: bool,
    /// Candidate thresholds for `--sweep` (comma separated).
    #[arg(long, value_delimiter = ',', requires = "sweep")]
    pub grid: Option<Vec<f64>>,
    /// Stream-order seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: EvalInput,
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[command(flatten)]
    pub input: EvalInput,
    /// Query-draw seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_rank: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "batch_hard_cluster")]
    pub loss: LossKind,
    #[arg(long, default_value_t = 3)]
    pub p: usize,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 5)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub batches: usize,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Check parameter gradients through a small network instead of
    /// embedding gradients.
    #[arg(long)]
    pub network: bool,
    /// Give every sample the same embedding so all class means coincide.
    #[arg(long)]
    pub collapse_means: bool,
    /// Optional directory for a JSON report and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitKind,
}

/// Outcome of a command that ran to completion.
pub enum Outcome {
    Ok,
    CheckFailed,
}

fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("EMBEDFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("EMBEDFORGE_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size worker pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::PrintConfig(a) => commands::print_config(&a.config, a.preset),
        Command::Train(a) => commands::train(&a),
        Command::EvalStream(a) => commands::eval_stream(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::EvalRank(a) => commands::eval_rank(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Export(a) => commands::export(&a),
    });
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
