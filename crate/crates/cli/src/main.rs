//! `stoei` command-line entry point.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "stoei", version, about = "Speech+text opinion expression identification experiments")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a corpus, split it and print corpus statistics.
    BuildData(BuildDataArgs),
    /// Train only the base LM on a text corpus (warm start for `train`).
    PretrainBase(PretrainArgs),
    /// Fine-tune adapter + LoRA (or LoRA only with --text-only).
    Train(TrainArgs),
    /// Decode a split with a checkpoint and write score reports.
    Eval(EvalArgs),
    /// Score externally produced tagged predictions against a manifest.
    Score(ScoreArgs),
    /// Corpus statistics, lexeme balance, and optional per-subset scores.
    Analyze(AnalyzeArgs),
    /// Compare analytic gradients with central differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
pub struct OutArg {
    /// Output directory (default: $STOEI_OUT/<command> or ./runs/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BuildDataArgs {
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, alias = "ambiguous")]
    pub ambiguous_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Directory written by build-data.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by build-data.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
    /// Train the ablation without a speech path.
    #[arg(long)]
    pub text_only: bool,
    /// Base-LM checkpoint from pretrain-base; pretrained inline if absent.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory written by build-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Which split manifest to decode.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Gold manifest.
    #[arg(long)]
    pub gold: PathBuf,
    /// Predictions, one `id<TAB>tagged text` per line.
    #[arg(long)]
    pub pred: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Manifest to analyze.
    #[arg(long)]
    pub gold: PathBuf,
    /// Optional predictions to break down by length and ambiguity.
    #[arg(long)]
    pub pred: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 200)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Also check frozen tensors.
    #[arg(long)]
    pub all: bool,
    /// Failure threshold on the maximum relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

fn main() {
    let cli = Cli::parse();
    let cfg = cli.config.as_deref();
    let result = match &cli.command {
        Command::BuildData(a) => commands::build_data(a, cfg),
        Command::PretrainBase(a) => commands::pretrain(a, cfg),
        Command::Train(a) => commands::train(a, cfg),
        Command::Eval(a) => commands::eval(a, cfg),
        Command::Score(a) => commands::score(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::GradCheck(a) => commands::grad_check(a),
    };
    if let Err(e) = result {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
