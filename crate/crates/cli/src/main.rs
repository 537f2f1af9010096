//! `colidr`: generate sprite datasets, train concept models and evaluate them.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use colidr::trainer::Ablation;
use colidr::xeval::{ConceptErrorKind, InterventionOrder};

pub const OUT_ENV: &str = "COLIDR_OUT";

#[derive(Debug, Parser)]
#[command(name = "colidr", version = manifest_version(), about = "Concept learning on disentangled sprite representations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn manifest_version() -> &'static str {
    concat!(env!("CARGO_PKG_VERSION"), "-", env!("COLIDR_GIT_DESCRIBE"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a labelled sprite dataset.
    Generate(GenerateArgs),
    /// Run the three-stage training schedule.
    Train(TrainArgs),
    /// Task accuracy, concept error and saliency IoU as JSON.
    Eval(EvalArgs),
    /// Latent attributions and saliency maps for one concept.
    Attribute(AttributeArgs),
    /// Decode sweeps along latent dimensions.
    Traverse(TraverseArgs),
    /// Test-time intervention curve.
    Intervene(InterveneArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Conjunction of two conditions, e.g. `shape=square,x>0.5`.
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = OUT_ENV)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Training configuration (JSON); unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configuration's ablation.
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
    #[arg(long, env = OUT_ENV)]
    pub out: PathBuf,
}

/// Checkpoint and dataset selection shared by the evaluation commands.
#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    pub split: String,
    /// Training configuration holding the model shape; defaults to the
    /// run manifest next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-sample work.
    #[arg(long, default_value_t = default_workers())]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Samples (from the start of the split) used for saliency IoU.
    #[arg(long, default_value_t = 100)]
    pub iou_samples: usize,
    /// Integrated-gradient steps.
    #[arg(long, default_value_t = 128)]
    pub steps: usize,
    #[arg(long, default_value = "rmse", value_parser = parse_error_kind)]
    pub error_kind: ConceptErrorKind,
    /// Directory for `summary.json` and `iou_by_concept.csv`; the summary
    /// always goes to stdout.
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Concept name, e.g. `is_square`.
    #[arg(long)]
    pub concept: String,
    #[arg(long, default_value_t = 2)]
    pub top: usize,
    /// Sample indices within the split.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub samples: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    pub steps: usize,
    #[arg(long, env = OUT_ENV)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TraverseArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Sample whose posterior mean anchors the sweep.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Dimensions to sweep; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    pub hi: f64,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, env = OUT_ENV)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterveneArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value = "most_deviant", value_parser = parse_order)]
    pub order: InterventionOrder,
    /// Seed of the random ordering.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = OUT_ENV)]
    pub out: PathBuf,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: colidr::Error| e.to_string())
}

fn parse_error_kind(s: &str) -> Result<ConceptErrorKind, String> {
    s.parse().map_err(|e: colidr::Error| e.to_string())
}

fn parse_order(s: &str) -> Result<InterventionOrder, String> {
    match s {
        "most_deviant" => Ok(InterventionOrder::MostDeviant),
        "random" => Ok(InterventionOrder::Random),
        _ => Err(format!("unknown order {s:?} (expected most_deviant or random)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
