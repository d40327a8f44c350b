//! `layerdrop`: command-line front end for planning, applying and evaluating
//! encoder layer drops.
//!
//! Every successful run prints one JSON report on stdout:
//! `{"command": ..., "payload": ..., "schema_version": "1"}` with sorted keys.
//! Exit codes: 0 on success, 1 for usage errors (including plans whose
//! preconditions fail), 2 for unreadable or inconsistent data.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod error;

#[derive(Debug, Parser)]
#[command(
    name = "layerdrop",
    version,
    about = "Layer-dropping toolkit for transformer encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct SchemeArg {
    /// JSON naming scheme (embedding_prefixes, layer_pattern, other_prefixes);
    /// defaults to the BERT layout.
    #[arg(long, value_name = "FILE")]
    scheme: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the layer topology and parameter counts of a checkpoint.
    Inspect {
        checkpoint: PathBuf,
        #[command(flatten)]
        scheme: SchemeArg,
    },
    /// Compute a drop plan from a positional strategy or a similarity profile.
    Plan(PlanArgs),
    /// Remove the layers of a plan from a checkpoint and write the result.
    Apply {
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        plan: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        scheme: SchemeArg,
    },
    /// Measure each layer's mean CLS cosine similarity over a dataset.
    Score {
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Line-delimited JSON examples: {"tokens": [...], "label": optional}.
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.95,0.925,0.9")]
        thresholds: Vec<f64>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[command(flatten)]
        scheme: SchemeArg,
    },
    /// Fine-tune an encoder on a synthetic task, optionally dropping layers.
    Finetune(FinetuneArgs),
    /// Largest number of dropped layers whose score stays within a threshold.
    Report {
        /// JSON object mapping K (dropped layers) to a score, e.g. {"0": 92.4, "2": 92.2}.
        #[arg(long, value_name = "FILE")]
        scores: PathBuf,
        /// Allowed loss in absolute score points.
        #[arg(long)]
        threshold_points: f64,
        /// Score of the full model, when the table has no K = 0 entry.
        #[arg(long)]
        full_score: Option<f64>,
    },
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// top, bottom, odd-alternate, even-alternate, symmetric or contribution.
    #[arg(long)]
    strategy: String,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Similarity threshold for contribution plans.
    #[arg(long)]
    threshold: Option<f64>,
    /// Precomputed profile (a `score` report or a bare profile).
    #[arg(long, value_name = "FILE", conflicts_with_all = ["checkpoint", "config", "data"])]
    profile: Option<PathBuf>,
    /// Checkpoint to profile inline; needs --config and --data.
    #[arg(long, value_name = "FILE", requires_all = ["config", "data"])]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "checkpoint")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "checkpoint")]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[command(flatten)]
    scheme: SchemeArg,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Task spec: {"task": {...}, "train": {...}}.
    #[arg(long, value_name = "FILE")]
    task: PathBuf,
    #[arg(long, value_name = "FILE")]
    plan: Option<PathBuf>,
    /// Drop the plan's layers one at a time, every second epoch.
    #[arg(long, requires = "plan", conflicts_with = "drop_after_finetune")]
    gradual: bool,
    /// Fine-tune the full model first, then drop and fine-tune again.
    #[arg(long, requires = "plan")]
    drop_after_finetune: bool,
    /// Write the trained encoder and head to this checkpoint.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Write per-step and per-epoch records as JSON lines.
    #[arg(long, value_name = "FILE")]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    scheme: SchemeArg,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
