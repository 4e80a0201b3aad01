mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use afa_core::AfaError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "afa", version, about = "Adversarial attention feedback experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Concurrent trainings for `sweep`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train target and discriminator; writes history, checkpoints and metrics.
    Train,
    /// Evaluate a checkpoint on the test set.
    Eval(commands::EvalArgs),
    /// Accuracy vs mask size k with t-distribution intervals.
    Sweep(commands::SweepArgs),
    /// Write a synthetic planted-signal dataset.
    GenPlanted(commands::PlantedArgs),
    /// Attention heat maps for the first examples of the test set.
    Viz(commands::VizArgs),
}

/// Marks failures that should exit with the configuration status.
#[derive(Debug)]
pub struct ConfigFailure(pub String);

impl std::fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err
        .chain()
        .any(|e| e.is::<ConfigFailure>() || matches!(e.downcast_ref::<AfaError>(), Some(AfaError::Config { .. })));
    if config {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train => commands::train(&cli.common),
        Command::Eval(args) => commands::eval(&cli.common, &args),
        Command::Sweep(args) => commands::sweep(&cli.common, &args),
        Command::GenPlanted(args) => commands::gen_planted(&cli.common, &args),
        Command::Viz(args) => commands::viz(&cli.common, &args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
