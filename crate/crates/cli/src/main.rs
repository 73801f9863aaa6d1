mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use temprox::data::Split;
use temprox::training::Ablation;

#[derive(Parser, Debug)]
#[command(name = "temprox", version, about = "Temporal-proximity sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Flags override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (synth) or directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Raw interaction CSV.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Preprocessed dataset JSON, or a raw CSV to preprocess on load.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Contrastive / overlap window radius in days.
    #[arg(long, allow_negative_numbers = true)]
    pub delta: Option<i64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub kt: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long = "num-neg")]
    pub num_neg: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "top-u")]
    pub top_u: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter and remap a raw interaction CSV into a dataset.
    Preprocess(Overrides),
    /// Generate a synthetic interaction CSV with planted temporal structure.
    Synth(Overrides),
    /// Train a model; writes a checkpoint, a metrics log and a test report.
    Train(Overrides),
    /// Evaluate a checkpoint against sampled negatives.
    Evaluate(Overrides),
    /// Train every ablation variant and tabulate test metrics.
    Ablate {
        #[command(flatten)]
        flags: Overrides,
        /// Number of consecutive seeds per variant.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Exploratory statistics of an interaction log.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Grid search from the `[sweep]` table of the config.
    Sweep(Overrides),
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    /// Histogram of day gaps between consecutive interactions.
    Intervals(Overrides),
    /// Item overlap ratio of the most active users.
    Overlap(Overrides),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // Help and version go to stdout with status 0; usage errors exit 2.
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Command::Preprocess(o) => commands::preprocess(&o),
        Command::Synth(o) => commands::synth(&o),
        Command::Train(o) => commands::train(&o),
        Command::Evaluate(o) => commands::evaluate(&o),
        Command::Ablate { flags, seeds } => commands::ablate(&flags, seeds),
        Command::Analyze { what: AnalyzeCommand::Intervals(o) } => commands::intervals(&o),
        Command::Analyze { what: AnalyzeCommand::Overlap(o) } => commands::overlap(&o),
        Command::Sweep(o) => commands::sweep(&o),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
