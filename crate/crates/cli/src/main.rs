use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

mod commands;
mod metadata;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Simulate,
    Fit,
    Filter,
    Smooth,
    Predict,
    Bootstrap,
    Bench,
}

/// Switching state space models with feedback: simulation, estimation,
/// filtering, smoothing and bootstrap intervals.
#[derive(Debug, Parser)]
#[command(name = "mssfs", version)]
pub struct Args {
    /// TOML run configuration; every section is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Long-format dataset (subject_id, time, y..., covariates...).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum)]
    pub command: Command,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match commands::run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({
                "error": {
                    "kind": e.kind(),
                    "message": e.to_string(),
                }
            });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
