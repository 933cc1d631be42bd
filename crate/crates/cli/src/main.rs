//! penmark: writer identification and retrieval over handwritten pages.
//!
//! Subcommands cover the whole pipeline: `patches` cuts contour-centered
//! patches out of page images, `train` learns the embedding layer with
//! semi-hard triplet loss, `encode` aggregates documents into global
//! descriptors, `evaluate` ranks and scores them, `synth` generates seeded
//! benchmark corpora, and `replay` re-runs any manifest.
//!
//! Every run writes a manifest next to its outputs; equal manifests mean
//! byte-identical outputs, regardless of `--threads`.

mod commands;
mod error;
mod manifest;

use clap::{Parser, Subcommand};
use error::{CliError, CliResult};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "penmark", version, about = "Writer identification and retrieval pipeline")]
struct Cli {
    /// Worker threads for per-document stages (default: all cores).
    /// Thread count never changes output bytes.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract 32x32 contour-centered patches from PGM pages.
    Patches(commands::patches::PatchesArgs),
    /// Learn embedding-layer parameters with semi-hard triplet loss.
    Train(commands::train::TrainArgs),
    /// Aggregate descriptor sets into global document descriptors.
    Encode(commands::encode::EncodeArgs),
    /// Rank documents leave-one-out and score Top-1/Hard-N/mAP.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Generate a seeded synthetic writer corpus.
    Synth(commands::synth::SynthArgs),
    /// Re-run the command a manifest describes.
    Replay(commands::replay::ReplayArgs),
}

fn run_command(command: Command) -> CliResult<()> {
    match command {
        Command::Patches(args) => commands::patches::run(&args),
        Command::Train(args) => commands::train::run(&args),
        Command::Encode(args) => commands::encode::run(&args),
        Command::Evaluate(args) => commands::evaluate::run(&args),
        Command::Synth(args) => commands::synth::run(&args),
        Command::Replay(args) => commands::replay::run(&args),
    }
}

/// Parses and runs an argv (without the binary name); used by `replay`.
pub(crate) fn dispatch(argv: &[String]) -> CliResult<()> {
    let cli = Cli::try_parse_from(std::iter::once("penmark".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    run_command(cli.command)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(64)
                }
            };
        }
    };
    if let Some(n) = cli.threads {
        if n < 1 {
            eprintln!("usage error: --threads must be at least 1");
            return ExitCode::from(64);
        }
        // Ignore failure if a pool already exists (e.g. under replay).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
