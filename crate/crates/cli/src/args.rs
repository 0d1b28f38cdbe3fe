use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fsaa_core::model::CombineMode;

#[derive(Debug, Parser)]
#[command(
    name = "fsaa",
    version,
    about = "Few-shot classification with support-adaptive attention"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Episodic training; writes a checkpoint and a loss log.
    Train(TrainArgs),
    /// Accuracy over random test episodes with a 95% interval.
    Eval(EvalArgs),
    /// Attention heatmap of a query image conditioned on a support image.
    Visualize(VisualizeArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Trains and evaluates the combination / classifier / TTA grid.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Root of a `<class>/<image>.pgm|ppm` tree.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Use the built-in shape corpus (train or test class split).
    #[arg(long)]
    pub synthetic: bool,
    /// Side length images are resized to (training only; evaluation uses
    /// the checkpoint's).
    #[arg(long, default_value_t = 28)]
    pub image_size: usize,
    /// Add 90/180/270 degree rotations of every class as new classes.
    #[arg(long)]
    pub rotate: bool,
    /// Seed of the synthetic corpus.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EpisodeArgs {
    /// Classes per episode (K).
    #[arg(long, default_value_t = 5)]
    pub way: usize,
    /// Support images per class (n).
    #[arg(long, default_value_t = 1)]
    pub shot: usize,
    /// Query images per class (m).
    #[arg(long, default_value_t = 15)]
    pub query: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[arg(long, default_value_t = 2000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = CombineMode::Reweight)]
    pub combine: CombineMode,
    /// Train and predict with attention logits only.
    #[arg(long)]
    pub no_classifier: bool,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log path [default: <out>.log].
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    #[arg(long, default_value_t = 600)]
    pub episodes: usize,
    /// Augmented copies per support image averaged into its weights.
    #[arg(long, default_value_t = 0)]
    pub tta: usize,
    /// Allow horizontal flips in test-time augmentation.
    #[arg(long)]
    pub flip: bool,
    /// One adaptation step on the support set of every episode.
    #[arg(long)]
    pub finetune: bool,
    #[arg(long, default_value_t = fsaa_core::episodic::FINETUNE_LR)]
    pub finetune_lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub support: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    /// Writes `<prefix>_heatmap.pgm` and `<prefix>_overlay.pgm`.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated op names, or `all`.
    #[arg(long, default_value = "all")]
    pub ops: String,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Random instances per op.
    #[arg(long, default_value_t = 5)]
    pub instances: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    /// Query images per class in training episodes.
    #[arg(long, default_value_t = 5)]
    pub train_query: usize,
    #[arg(long, default_value_t = 1000)]
    pub episodes_train: usize,
    #[arg(long, default_value_t = 600)]
    pub episodes_eval: usize,
    /// Copies used by the TTA-on rows.
    #[arg(long, default_value_t = fsaa_core::episodic::TTA_COPIES)]
    pub tta: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
