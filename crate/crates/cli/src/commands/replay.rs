//! `penmark replay`: re-execute the run a manifest describes, after checking
//! that every recorded input is unchanged.

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use std::path::PathBuf;

#[derive(Debug, clap::Args)]
pub struct ReplayArgs {
    /// Manifest written by a previous run.
    pub manifest: PathBuf,
    /// Output directory for the replayed run.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &ReplayArgs) -> CliResult<()> {
    let manifest = RunManifest::load(&args.manifest)?;
    if manifest.tool != "penmark" {
        return Err(CliError::Input(format!(
            "manifest was written by {:?}, not penmark",
            manifest.tool
        )));
    }
    manifest.verify_inputs()?;
    let argv = manifest.to_argv(&args.out);
    crate::dispatch(&argv)
}
