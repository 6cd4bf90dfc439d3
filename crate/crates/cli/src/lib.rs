//! Subcommands behind the `idle` binary.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::run;
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "idle",
    version,
    about = "ID-steered prefix adapter for sequential recommendation"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; defaults to runs/<unix-time>-seed<seed>.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-pattern corpus.
    Generate(GenerateArgs),
    /// Pretrain the ID model.
    Pretrain(PretrainArgs),
    /// Train the adapter with the ID model and backbone frozen.
    Train(TrainArgs),
    /// Score a trained checkpoint.
    Eval(EvalArgs),
    /// Train and score the full adapter and its ablations.
    Ablate(TrainArgs),
    /// Write per-user embeddings from the three model sides.
    Dump(DumpArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    /// Items needed to determine the next one.
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Interaction file (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint written by `pretrain`.
    #[arg(long)]
    pub id_checkpoint: PathBuf,
    /// Backbone checkpoint; initialised from the seed when absent.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// none, layerwise, refinement or distribution.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Alignment weights, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    /// Virtual tokens per layer: `2`, `1,3` or `1..4` (inclusive).
    #[arg(long)]
    pub prompt_len: Option<String>,
    /// Keep the item head fixed.
    #[arg(long)]
    pub freeze_head: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `test` or `validation`.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Only the first N users.
    #[arg(long)]
    pub limit: Option<usize>,
}
