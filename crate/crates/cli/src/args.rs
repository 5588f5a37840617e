use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "sar",
    version,
    about = "Semantic analysis rating model: training, evaluation and export"
)]
pub struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, env = "SAR_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus a training log.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out side of a split.
    Eval(EvalArgs),
    /// Predict one rating by raw IDs.
    Predict(PredictArgs),
    /// Export per-feature category profiles with 2-D PCA coordinates.
    Semantics(SemanticsArgs),
    /// Train and evaluate over a list of values of one parameter.
    Sweep(SweepArgs),
    /// Train and evaluate a factorization baseline.
    Baseline(BaselineArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    /// Rating file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// ml100k or ml1m.
    #[arg(long)]
    pub format: Option<String>,
    /// Fraction of ratings used for training.
    #[arg(long, allow_negative_numbers = true)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key = value` settings file; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    /// Number of features |F|.
    #[arg(long, visible_alias = "F")]
    pub features: Option<usize>,
    /// Categories per feature |C|.
    #[arg(long, visible_alias = "C")]
    pub categories: Option<usize>,
    /// Highest rating level |R|; defaults to the largest rating in the data.
    #[arg(long, visible_alias = "R")]
    pub rating_max: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub eta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub init_scale: Option<f64>,
    #[arg(long)]
    pub lazy_rows: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV; defaults to the checkpoint path with `.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also write the checkpoint every K rounds.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Write the split as `<prefix>.train` / `<prefix>.test`.
    #[arg(long)]
    pub save_split: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Defaults for data, format, rho and seed come from the checkpoint.
    #[command(flatten)]
    pub data: DataArgs,
    /// `metric,value` CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub user: u64,
    #[arg(long)]
    pub item: u64,
}

#[derive(Debug, Args)]
pub struct SemanticsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// 0-based feature index.
    #[arg(long)]
    pub feature: usize,
    /// user or item.
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// rho, F, C, sigma or lambda.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values.
    #[arg(long)]
    pub values: String,
    /// Comma-separated seeds; defaults to 0,1,2.
    #[arg(long)]
    pub seeds: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Sweep CSV; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// mf or nmf.
    #[arg(long)]
    pub method: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Factor rank.
    #[arg(long)]
    pub k: Option<usize>,
    /// SGD step (mf only).
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    /// L2 penalty (mf only).
    #[arg(long, allow_negative_numbers = true)]
    pub reg: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `metric,value` CSV.
    #[arg(long)]
    pub results: Option<PathBuf>,
}
