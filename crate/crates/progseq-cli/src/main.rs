//! Command-line entry points: corpus generation, training,
//! generation, evaluation, gradient verification, and rendering.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use progseq::train::Regime;

#[derive(Parser)]
#[command(
    name = "progseq",
    about = "Symbolic sentences to continuous pose trajectories: data, training, generation, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus directory.
    MakeData(MakeDataArgs),
    /// Train a model on a corpus directory.
    Train(TrainArgs),
    /// Generate a pose sequence from a sentence.
    Generate(GenerateArgs),
    /// Back-translation evaluation of a checkpoint on a corpus split.
    Evaluate(EvaluateArgs),
    /// Verify every operation and loss against finite differences.
    Gradcheck,
    /// Render a pose file to per-frame SVGs plus a CSV dump.
    Render(RenderArgs),
}

#[derive(Args)]
struct MakeDataArgs {
    /// Generation seed (PROGSEQ_SEED overrides).
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Content vocabulary size.
    #[arg(long, default_value_t = 12)]
    vocab: usize,
    /// Total sentence count across splits.
    #[arg(long, default_value_t = 750)]
    sentences: usize,
    /// Skeleton joint count.
    #[arg(long, default_value_t = 8)]
    joints: usize,
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration (flags below override fields).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory from make-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, log, and run config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_regime)]
    regime: Option<Regime>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Training seed (PROGSEQ_SEED overrides).
    #[arg(long)]
    seed: Option<u64>,
    /// Back-translate the dev split every N epochs.
    #[arg(long)]
    dev_backtranslate_every: Option<usize>,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse()
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory (vocabulary and template source).
    #[arg(long)]
    data: PathBuf,
    /// Space-separated source tokens.
    #[arg(long)]
    input: String,
    /// `feedback` or `teacher:<frames>`.
    #[arg(long, default_value = "feedback")]
    mode: String,
    /// Output pose file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Corpus split: train, dev, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// `feedback` or `teacher` (reference-length timing).
    #[arg(long, default_value = "feedback")]
    mode: String,
    /// Worker threads; results merge deterministically.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Optional directory for the report and run config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// POSEQ1 input file.
    #[arg(long)]
    pose: PathBuf,
    /// Output directory for SVG frames and the CSV dump.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeData(args) => commands::make_data(args),
        Command::Train(args) => commands::train(args),
        Command::Generate(args) => commands::generate(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Gradcheck => commands::gradcheck(),
        Command::Render(args) => commands::render(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
