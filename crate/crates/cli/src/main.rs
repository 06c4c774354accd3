//! Command-line entry point wiring dataset generation, graph construction,
//! training, evaluation, and localization into reproducible runs.
//!
//! Exit codes: 0 success, 1 runtime failure (missing file, bad data),
//! 2 configuration or usage error, 3 non-finite training loss.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use relconv_core::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "relconv",
    version,
    about = "Multi-relational graph convolution over images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-label image dataset with ground-truth boxes.
    GenSynthetic(commands::gen::GenArgs),
    /// Build per-relation normalized adjacency graphs from a manifest split.
    BuildGraph(commands::graph::GraphArgs),
    /// Train a model with neighbor-sampled batches and per-epoch validation.
    Train(commands::train::TrainArgs),
    /// Score per-class AUC of a checkpoint on a split.
    Eval(commands::eval::EvalArgs),
    /// Produce class-activation heatmaps and boxes, scored against ground truth.
    Localize(commands::localize::LocalizeArgs),
    /// Dump a sampled subgraph as JSON for inspection.
    SampleDebug(commands::sample::SampleArgs),
}

/// RELCONV_THREADS caps the global worker pool used for convolutions.
fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("RELCONV_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| {
            Error::Config(format!(
                "RELCONV_THREADS must be a positive integer, got '{}'",
                raw
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool setup failed: {}", e)))
}

fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) => 2,
        Error::NonFiniteLoss { .. } => 3,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match cli.command {
        Command::GenSynthetic(args) => commands::gen::run(args),
        Command::BuildGraph(args) => commands::graph::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Localize(args) => commands::localize::run(args),
        Command::SampleDebug(args) => commands::sample::run(args),
    });
    if let Err(e) = result {
        eprintln!("error: {}", e);
        std::process::exit(exit_code(&e));
    }
}
