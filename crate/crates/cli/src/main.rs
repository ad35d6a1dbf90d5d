mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "wfn", version, about = "Satellite-to-radar precipitation nowcasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory (file for `generate`).
    #[arg(long, env = "WFN_OUT_DIR")]
    pub out: PathBuf,
    #[arg(long, default_value = "cpu")]
    pub device: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic event archive.
    Generate(commands::GenerateArgs),
    /// Train one stage and write a checkpoint, config echo and CSV log.
    Train(commands::TrainArgs),
    /// Predict one sample and render a target / probability / binary panel.
    Predict(commands::PredictArgs),
    /// Score a checkpoint and the persistence baseline on archives.
    Evaluate(commands::EvaluateArgs),
}

/// Exit 2: the invocation or its configuration is wrong.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use weatherfusion::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(E::InvalidArgument(_) | E::MissingCheckpoint(_) | E::Json(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
