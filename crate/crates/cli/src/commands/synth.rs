//! `penmark synth`: generate a seeded synthetic writer corpus as DESC1 files.

use crate::error::{CliError, CliResult};
use crate::manifest::{ensure_out_dir, RunManifest};
use penmark::descriptor::write_desc;
use penmark::synth::{generate, SynthConfig};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub writers: usize,
    /// Documents per writer.
    #[arg(long, default_value_t = 4)]
    pub docs: usize,
    /// Descriptors per document.
    #[arg(long, default_value_t = 50)]
    pub patches: usize,
    /// Descriptor dimensionality.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Expected distance between writer centers, in units of --noise.
    #[arg(long, default_value_t = 5.0)]
    pub separation: f64,
    /// Per-coordinate descriptor standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output directory (one .desc per document, manifest.json).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &SynthArgs) -> CliResult<()> {
    if args.writers < 1 || args.docs < 1 || args.patches < 1 || args.dim < 1 {
        return Err(CliError::Usage(
            "--writers, --docs, --patches, and --dim must all be at least 1".into(),
        ));
    }
    if !(args.separation > 0.0) || !(args.noise > 0.0) {
        return Err(CliError::Usage("--separation and --noise must be positive".into()));
    }

    let manifest_flags = BTreeMap::from([
        ("writers".to_string(), args.writers.to_string()),
        ("docs".to_string(), args.docs.to_string()),
        ("patches".to_string(), args.patches.to_string()),
        ("dim".to_string(), args.dim.to_string()),
        ("separation".to_string(), args.separation.to_string()),
        ("noise".to_string(), args.noise.to_string()),
        ("seed".to_string(), args.seed.to_string()),
    ]);
    let mut manifest = RunManifest::new("synth", manifest_flags);

    let sets = generate(&SynthConfig {
        writers: args.writers,
        docs_per_writer: args.docs,
        descriptors_per_doc: args.patches,
        dim: args.dim,
        separation: args.separation,
        noise: args.noise,
        seed: args.seed,
    });

    ensure_out_dir(&args.out)?;
    let mut outputs = Vec::new();
    for set in &sets {
        let name = format!("{}.desc", set.doc_id);
        write_desc(&args.out.join(&name), set).map_err(|e| CliError::Data(e.to_string()))?;
        outputs.push(name);
    }
    manifest.finish(&args.out, outputs)?;
    println!(
        "generated {} documents ({} writers x {} docs, {} descriptors each) in {}",
        sets.len(),
        args.writers,
        args.docs,
        args.patches,
        args.out.display()
    );
    Ok(())
}
