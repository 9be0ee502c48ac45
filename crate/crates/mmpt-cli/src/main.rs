//! Command-line front end for the multi-frame pointmap decoder.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmpt::error::Error;

use config::FileConfig;

#[derive(Parser)]
#[command(name = "mmpt", version, about = "Multi-frame pointmap transformer tools")]
struct Cli {
    /// Plain-text key = value config file; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic clip dataset to disk.
    GenData(commands::GenDataArgs),
    /// Train a decoder and write checkpoints plus logs.
    Train(commands::TrainArgs),
    /// Decode a clip window with the incremental cache.
    Infer(commands::InferArgs),
    /// Score a checkpoint or the ground-truth oracle on strided slices.
    Eval(commands::EvalArgs),
    /// Run the library's invariant checks, stopping at the first failure.
    Verify(commands::VerifyArgs),
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Invariant { .. }
        | Error::ShapeMismatch { .. }
        | Error::BadShape { .. }
        | Error::Ordering(_) => 1,
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format(_) => 3,
        Error::NonFinite(_) | Error::FullyMaskedRow(_) | Error::Numeric(_) => 4,
        Error::Checkpoint(_) => 5,
        Error::Dataset(_) => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> mmpt::error::Result<()> {
        let file = FileConfig::load(cli.config.as_deref())?;
        match &cli.command {
            Command::GenData(args) => commands::gen_data(args, &file),
            Command::Train(args) => commands::train(args, &file),
            Command::Infer(args) => commands::infer(args, &file),
            Command::Eval(args) => commands::eval(args, &file),
            Command::Verify(args) => commands::verify(args),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
