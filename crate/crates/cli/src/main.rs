mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scp_core::ErrorClass;

#[derive(Parser)]
#[command(name = "scp", version, about = "Fairness-aware channel pruning for small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic biased dataset (train and eval splits).
    GenData(GenDataArgs),
    /// Train the toy CNN on a generated dataset.
    Train(TrainArgs),
    /// Score the channels of one layer, from a model or a feature-map file.
    ScoreChannels(ScoreArgs),
    /// Run a single prune + fine-tune iteration.
    Prune(PruneArgs),
    /// Run the iterative pruning recipe, optionally as a sweep.
    RunRecipe(RecipeArgs),
    /// Accuracy and fairness table for predictions, a model, or a metrics file.
    EvalFairness(EvalArgs),
    /// Summarise a recipe trace.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
pub struct SeedArg {
    /// Random seed; SCP_SEED overrides it when set.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Explicit,
    Implicit,
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Train-split correlation between sensitive attribute and class, in [0, 1].
    #[arg(long, default_value_t = 0.95, value_parser = unit_closed)]
    pub rho: f64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
    /// Training samples.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Evaluation samples.
    #[arg(long, default_value_t = 1000)]
    pub n_eval: usize,
    /// Square image side.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 0.5, value_parser = unit_open)]
    pub imbalance: f64,
    #[arg(long, default_value_t = 1.0, value_parser = non_negative)]
    pub noise: f64,
    /// Amplitude of the class pattern.
    #[arg(long, default_value_t = 0.5, value_parser = non_negative)]
    pub amplitude: f64,
    /// Intensity offset of group 1 in explicit mode.
    #[arg(long, default_value_t = 0.5, value_parser = non_negative)]
    pub offset: f64,
    #[arg(long, value_enum, default_value_t = Mode::Explicit)]
    pub mode: Mode,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Output directory; receives train.sds and eval.sds.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05, value_parser = positive)]
    pub lr: f64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ScoreArgs {
    #[arg(long, conflicts_with = "fmap", required_unless_present = "fmap", requires = "data")]
    pub model: Option<PathBuf>,
    /// Dataset directory (with --model).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    /// 1-based conv layer (with --model); defaults to the model's tap layer.
    #[arg(long)]
    pub layer: Option<usize>,
    /// FMAP feature-map file.
    #[arg(long)]
    pub fmap: Option<PathBuf>,
    /// Temperature T.
    #[arg(long, default_value_t = scp_core::snnl::DEFAULT_TEMPERATURE, value_parser = positive)]
    pub temp: f64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(2..))]
    pub batch: u64,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Score CSV; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Eval,
}

#[derive(Args, Clone)]
pub struct PruneFlags {
    /// Fraction of the layer's current channels pruned per iteration, in (0, 1).
    #[arg(long, default_value_t = 0.02, value_parser = unit_open)]
    pub prc: f64,
    /// 1-based conv layer to score and prune.
    #[arg(long, default_value_t = 2)]
    pub layer: usize,
    /// Temperature T.
    #[arg(long, default_value_t = scp_core::snnl::DEFAULT_TEMPERATURE, value_parser = positive)]
    pub temp: f64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(2..))]
    pub score_batch: u64,
    #[arg(long, default_value_t = 1)]
    pub finetune_epochs: usize,
    #[arg(long, default_value_t = 0.003, value_parser = positive)]
    pub finetune_lr: f64,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    pub finetune_batch: u64,
}

#[derive(Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub flags: PruneFlags,
    /// Remove exactly these channels (comma separated) instead of scoring.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Checkpoint path for the pruned model.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct RecipeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub flags: PruneFlags,
    /// Largest tolerated drop in group-averaged F1.
    #[arg(long, default_value_t = 0.02, value_parser = non_negative)]
    pub th_acc: f64,
    /// Smallest Eodd decrease per iteration.
    #[arg(long, default_value_t = 0.001, value_parser = non_negative)]
    pub th_fair: f64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_iters: u64,
    /// Ignore the accuracy and fairness rules (ablation curves).
    #[arg(long)]
    pub run_to_max_iters: bool,
    /// `prc=1,2,5` (percent) or `layer=1,2`; one run per value.
    #[arg(long)]
    pub sweep: Option<String>,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// `pred,label,group` CSV.
    #[arg(long, conflicts_with_all = ["model", "metrics"])]
    pub preds: Option<PathBuf>,
    #[arg(long, conflicts_with = "metrics", requires = "data")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
    pub split: SplitArg,
    /// Metrics JSON of the model under comparison.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Baseline metrics JSON; enables FATE.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value_t = scp_core::fairness::DEFAULT_LAMBDA, value_parser = non_negative)]
    pub lambda: f64,
    #[arg(long, default_value = "model")]
    pub name: String,
    /// Directory for report.csv and metrics.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// trace.jsonl written by run-recipe.
    #[arg(long)]
    pub trace: PathBuf,
    /// Also write the per-iteration CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err("must be finite".into())
    }
}

fn unit_closed(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must lie in [0, 1], got {v}"))
    }
}

fn unit_open(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 1), got {v}"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be non-negative, got {v}"))
    }
}

/// A mistake in the command line that clap cannot see.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<scp_core::Error>() {
            return match e.class() {
                ErrorClass::Usage | ErrorClass::Io => 2,
                ErrorClass::DataFormat => 3,
                ErrorClass::Numeric => 4,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::ScoreChannels(a) => commands::score_channels(a),
        Command::Prune(a) => commands::prune(a),
        Command::RunRecipe(a) => commands::run_recipe(a),
        Command::EvalFairness(a) => commands::eval_fairness(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
