//! `mmr`: train, sample from, and analyse latent-attention MoE language models.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
//! configuration error.

mod analyze;
mod failure;
mod generate;
mod route_stats;
mod run_config;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use failure::Failure;

/// Default output directory when neither the flag nor the config file sets one.
pub const OUT_DIR_ENV: &str = "MMR_OUT_DIR";

#[derive(Parser)]
#[command(name = "mmr", version, about = "Latent-attention mixture-of-experts language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Continue a prompt from a checkpoint.
    Generate(GenerateArgs),
    /// Report analytic compute and KV-cache costs for a configuration.
    Analyze(AnalyzeArgs),
    /// Route a text through a checkpoint and summarise expert usage.
    RouteStats(RouteStatsArgs),
}

#[derive(clap::Args)]
pub struct TrainArgs {
    /// Run configuration with `model`, `train` and `paths` sections.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides both `train.seed` and `model.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `paths.out_dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Train once per value and write an aggregate CSV, e.g. `model.latent_dim=8,16,32`.
    #[arg(long, value_name = "KEY=V1,V2,...")]
    pub sweep: Option<String>,
}

#[derive(clap::Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    /// Pick the most likely token at every step (the default).
    #[arg(long, conflicts_with_all = ["temperature", "top_p"])]
    pub greedy: bool,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Nucleus sampling threshold; combines with `--temperature` (default 1).
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Recompute the whole sequence every step instead of using the KV cache.
    #[arg(long)]
    pub no_cache: bool,
    /// JSON vocabulary map; byte-level when omitted.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Format {
    Json,
    Table,
    Csv,
}

#[derive(clap::Args)]
pub struct AnalyzeArgs {
    /// Run configuration (only its `model` section is read).
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in size: xs, s, m, l or xl.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seq_len: u64,
    /// Sequences cached together; multiplies the KV-cache figures.
    #[arg(long, default_value_t = 1)]
    pub batch: u64,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Also run one instrumented forward pass and report the deltas.
    #[arg(long)]
    pub measure: bool,
}

#[derive(clap::Args)]
pub struct RouteStatsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Text to route; only the trailing `--fraction` of it is used.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    /// Maximum number of tokens routed.
    #[arg(long, default_value_t = 16_384)]
    pub max_tokens: usize,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train::run(&a),
        Command::Generate(a) => generate::run(&a),
        Command::Analyze(a) => analyze::run(&a),
        Command::RouteStats(a) => route_stats::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
