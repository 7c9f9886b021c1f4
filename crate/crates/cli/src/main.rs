use std::process::ExitCode;

use clap::{Parser, Subcommand};
use histaid_core::Error;

mod commands;
mod config;
mod output;

/// Temporal multi-modal diagnosis from precomputed image and report embeddings.
#[derive(Parser, Debug)]
#[command(name = "histaid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort: tables, embedding store and a default build.
    Synth(commands::SynthArgs),
    /// Join tables, build temporal samples, filter and split by patient.
    Build(commands::BuildArgs),
    /// Train one model per seed and keep the best-validation checkpoint.
    Train(commands::TrainArgs),
    /// Evaluate a training run on one split.
    Eval(commands::EvalArgs),
    /// Sweep one setting across values and seeds.
    Ablate(commands::AblateArgs),
    /// Collect runs and ablations into tables.
    Report(commands::ReportArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Leakage(_) | Error::Corrupt { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Build(a) => commands::build(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate_cmd(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
