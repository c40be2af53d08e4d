//! `hybridcast` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybridcast::Error;

#[derive(Parser)]
#[command(name = "hybridcast", version, about = "Hybrid-decomposition mixture-of-experts forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `model.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write checkpoint, history and resolved config.
    Train(Common),
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Add last-value and seasonal-naive rows to the metrics file.
        #[arg(long)]
        baselines: bool,
    },
    /// Forecast the steps following the last lookback window.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Series to forecast from; defaults to the configured data.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write per-channel decomposition CSVs of a series.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest {
        /// Corrupt one check on purpose (negative control).
        #[arg(long)]
        inject_fault: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => commands::train(&c.config, c.out, c.seed),
        Command::Eval { common: c, checkpoint, baselines } => {
            commands::eval(&c.config, &checkpoint, c.out, c.seed, baselines)
        }
        Command::Predict { common: c, checkpoint, input } => {
            commands::predict(&c.config, &checkpoint, input.as_deref(), c.out, c.seed)
        }
        Command::Decompose { common: c, input } => commands::decompose(&c.config, &input, c.out, c.seed),
        Command::Selftest { inject_fault } => {
            return if selftest::run(inject_fault) { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
