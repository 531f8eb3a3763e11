use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualvit_core::gradcheck::CheckTarget;
use dualvit_core::{AblationVariant, Preset};

#[derive(Debug, Parser)]
#[command(
    name = "dualvit",
    version,
    about = "Describe, count, gradient-check and train dual-pathway vision transformers"
)]
pub struct Cli {
    /// Print machine-readable JSON on stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Seed for initialization, batch order, sampling and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-stage architecture table.
    Describe {
        #[command(flatten)]
        model: ModelArgs,
        /// Input resolution (defaults to the config's).
        #[arg(long)]
        res: Option<usize>,
    },
    /// Parameter and multiply-accumulate counts.
    Count {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        res: Option<usize>,
        /// List every module instead of one line per top-level group.
        #[arg(long)]
        breakdown: bool,
        #[arg(long, default_value = "d")]
        variant: AblationVariant,
    },
    /// Central-difference gradient check in f64.
    Gradcheck(GradcheckArgs),
    /// Toy-scale training; writes a loss CSV and a checkpoint.
    Train(TrainArgs),
    /// Accuracy and loss of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare the dual-block variants a-d.
    Ablate(AblateArgs),
    /// Write a synthetic dataset as a DVDS file.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Built-in preset: S, B, L or tiny.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<Preset>,
    /// JSON model config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set stages.2.depth=4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Block {
    Dual,
    Merge,
    Transformer,
    Model,
    All,
}

impl Block {
    pub fn targets(self) -> Vec<CheckTarget> {
        match self {
            Block::Dual => vec![CheckTarget::Dual],
            Block::Merge => vec![CheckTarget::Merge],
            Block::Transformer => vec![CheckTarget::Transformer],
            Block::Model => vec![CheckTarget::Model],
            Block::All => CheckTarget::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub block: Block,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Scalar parameters sampled per target.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Dual-block variant used by the dual and model targets.
    #[arg(long, default_value = "d")]
    pub variant: AblationVariant,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// `synthetic` or the path of a DVDS file.
    #[arg(long, default_value = "synthetic")]
    pub data: String,
    /// Synthetic classes (defaults to the model's class count).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Synthetic samples per class.
    #[arg(long, default_value_t = 8)]
    pub per_class: usize,
    /// Synthetic data seed (defaults to --seed).
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value = "d")]
    pub variant: AblationVariant,
    /// Checkpoint path.
    #[arg(long, short, default_value = "dualvit.dvcp")]
    pub out: PathBuf,
    /// Per-step loss log (`step,loss,lr`).
    #[arg(long, default_value = "loss.csv")]
    pub loss_csv: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub res: Option<usize>,
    /// Also train every variant for this many steps and report accuracy.
    #[arg(long, default_value_t = 0)]
    pub train_steps: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub res: usize,
    #[arg(long, short)]
    pub out: PathBuf,
}
