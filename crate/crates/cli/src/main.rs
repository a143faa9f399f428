mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use balgrad_core::Error;
use clap::{Args, Parser, Subcommand};

/// Gradient-balanced bimodal linear probes: data generation, training,
/// first-order checks and ablations.
#[derive(Parser, Debug)]
#[command(name = "balgrad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the spec's synthetic dataset to DIR/dataset.bmf.
    Generate(Common),
    /// Train the spec's mode and evaluate it on the held-out split.
    Train(Common),
    /// Check the first-order loss-change expansions over a step-size grid.
    VerifyProps(Common),
    /// Run every configured mode on every configured seed.
    Ablate(Common),
    /// Missing-modality gap as a function of the affected fraction.
    SweepMissingRatio(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment spec (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir` in the spec.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Replaces every seed in the spec.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads for multi-run commands (default: all cores).
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;

/// Failure of a subcommand, carrying its exit status.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Core(Error::Config { .. } | Error::Format { .. }) => EXIT_CONFIG,
            Failure::Core(Error::TrainingDiverged { .. }) => EXIT_DIVERGED,
            Failure::Core(_) => 1,
            Failure::Verification(_) => EXIT_VERIFY,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(c) => commands::generate(c),
        Command::Train(c) => commands::train(c),
        Command::VerifyProps(c) => commands::verify_props(c),
        Command::Ablate(c) => commands::ablate(c),
        Command::SweepMissingRatio(c) => commands::sweep_missing_ratio(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Verification(msg) => eprintln!("verification failed:\n{msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}
