//! `hoi`: synthetic data, training, inference, evaluation and the k-means
//! baseline from the command line.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{DensityMode, PairwiseArg};

#[derive(Parser, Debug)]
#[command(name = "hoi", version, about = "Human-object interaction detection driver")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/test annotations and their proposal feature files.
    Synth(SynthArgs),
    /// Train the head network; writes a checkpoint and a loss log.
    Train(TrainArgs),
    /// Detect triplets; writes JSON-lines predictions and optional overlays.
    Infer(InferArgs),
    /// Role and agent AP of predictions against annotations.
    Eval(EvalArgs),
    /// Score with per-action k-means centers instead of the predicted density.
    Baseline(BaselineArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    test_scenes: Option<usize>,
    #[arg(long)]
    distractors: Option<usize>,
    /// Std-dev of feature noise.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Annotation file.
    #[arg(long)]
    data: PathBuf,
    /// Feature file keyed by proposal; synthetic features when absent.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Annotation schema.
    #[arg(long, value_enum, default_value = "vcoco-like")]
    schema: SchemaArg,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
enum SchemaArg {
    VcocoLike,
    HicoLike,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Total iterations; the last fifth runs at a tenth of the rate.
    #[arg(long)]
    iterations: Option<usize>,
    /// Learning rate of the first phase.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    images_per_step: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long, value_enum)]
    density: Option<DensityMode>,
    #[arg(long, value_enum)]
    pairwise: Option<PairwiseArg>,
    /// Train without the interaction branch.
    #[arg(long)]
    no_interaction: bool,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Training annotations; needed by the k-means density mode.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, value_enum)]
    density: Option<DensityMode>,
    #[arg(long)]
    score_thresh: Option<f64>,
    #[arg(long)]
    nms_thresh: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    max_triplets: Option<usize>,
    /// Also write per-image overlay descriptions.
    #[arg(long)]
    overlays: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "vcoco-like")]
    schema: SchemaArg,
    /// JSON-lines predictions.
    #[arg(long, required_unless_present = "ground_truth")]
    predictions: Option<PathBuf>,
    /// Score the annotations themselves (a sanity check of the evaluator).
    #[arg(long, conflicts_with = "predictions")]
    ground_truth: bool,
    #[arg(long)]
    iou_thresh: Option<f64>,
    #[arg(long)]
    require_category: bool,
    #[arg(long)]
    eleven_point: bool,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[command(flatten)]
    infer: InferArgs,
    /// Clusters per action.
    #[arg(long)]
    k: Option<usize>,
}

impl From<SchemaArg> for hoi_core::Schema {
    fn from(s: SchemaArg) -> Self {
        match s {
            SchemaArg::VcocoLike => hoi_core::Schema::VcocoLike,
            SchemaArg::HicoLike => hoi_core::Schema::HicoLike,
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let err = error::CliError::new(error::Kind::Config, first.trim_start_matches("error: "));
            eprintln!("{err}");
            std::process::exit(err.kind.exit_code());
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    if let Err(e) = commands::run(cli) {
        eprintln!("{e}");
        std::process::exit(e.kind.exit_code());
    }
}
