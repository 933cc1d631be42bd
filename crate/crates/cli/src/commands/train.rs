//! `penmark train`: learn embedding-layer parameters from a descriptor
//! corpus (DESC1 files) or a patch corpus (PTCH files plus labels.tsv).

use crate::commands::{file_stem, sorted_files_with_ext};
use crate::commands::patches::read_labels;
use crate::error::{CliError, CliResult};
use crate::manifest::{ensure_out_dir, RunManifest};
use penmark::descriptor::{
    project_with, read_desc_dir, DescriptorSet, Projection, DEFAULT_DESCRIPTOR_DIM,
};
use penmark::netvlad::{init_params, write_params, InitMode, NetVladError};
use penmark::numerics::{Matrix, SeededRng};
use penmark::page::{read_ptch, PATCH_SIDE};
use penmark::training::{train, TrainConfig, TrainingError};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Directory of DESC1 descriptor files.
    #[arg(long, conflicts_with = "patches")]
    pub desc: Option<PathBuf>,
    /// Directory of PTCH patch files plus labels.tsv.
    #[arg(long)]
    pub patches: Option<PathBuf>,
    /// Number of clusters in the embedding layer.
    #[arg(long = "k", default_value_t = 100)]
    pub clusters: usize,
    /// Triplet loss margin.
    #[arg(long, default_value_t = 0.1)]
    pub margin: f64,
    /// Adamax learning rate.
    #[arg(long = "lr", default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    /// Writers per batch.
    #[arg(long = "batch-writers", default_value_t = 8)]
    pub batch_writers: usize,
    /// Patches per writer per batch.
    #[arg(long = "batch-patches", default_value_t = 8)]
    pub batch_patches: usize,
    /// Initialization mode: kmeans or random.
    #[arg(long, default_value = "kmeans")]
    pub init: String,
    /// Assignment sharpness for kmeans-coupled initialization.
    #[arg(long, default_value_t = 25.0)]
    pub alpha: f64,
    /// Fraction of each writer's patches held out for validation.
    #[arg(long = "val-fraction", default_value_t = 0.05)]
    pub val_fraction: f64,
    /// Stop early once epoch loss stops improving.
    #[arg(long = "early-stop")]
    pub early_stop: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (params.nvld, loss.csv, manifest.json).
    #[arg(long)]
    pub out: PathBuf,
}

fn load_patch_corpus(
    dir: &PathBuf,
    seed: u64,
    manifest: &mut RunManifest,
) -> CliResult<Vec<DescriptorSet>> {
    let labels = read_labels(&dir.join("labels.tsv"))?;
    manifest.record_input(&dir.join("labels.tsv"))?;
    let files = sorted_files_with_ext(dir, "ptch")?;
    if files.is_empty() {
        return Err(CliError::Input(format!("no PTCH files in {}", dir.display())));
    }
    let projection = Projection::seeded(seed, PATCH_SIDE * PATCH_SIDE, DEFAULT_DESCRIPTOR_DIM);
    let mut sets = Vec::with_capacity(files.len());
    for file in &files {
        manifest.record_input(file)?;
        let stem = file_stem(file);
        let writer = labels
            .get(&stem)
            .ok_or_else(|| CliError::Input(format!("no writer label for {stem}")))?;
        let bytes = std::fs::read(file)?;
        let patches =
            read_ptch(&bytes).map_err(|e| CliError::Input(format!("{stem}: {e}")))?;
        if patches.is_empty() {
            return Err(CliError::Data(format!("{stem}: empty patch set")));
        }
        sets.push(
            project_with(&projection, &stem, writer, &patches)
                .map_err(|e| CliError::Data(format!("{stem}: {e}")))?,
        );
    }
    Ok(sets)
}

fn load_desc_corpus(dir: &PathBuf, manifest: &mut RunManifest) -> CliResult<Vec<DescriptorSet>> {
    for file in sorted_files_with_ext(dir, "desc")? {
        manifest.record_input(&file)?;
    }
    let sets = read_desc_dir(dir).map_err(|e| CliError::Input(e.to_string()))?;
    if sets.is_empty() {
        return Err(CliError::Input(format!("no DESC1 files in {}", dir.display())));
    }
    Ok(sets)
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let init_mode = match args.init.as_str() {
        "kmeans" => InitMode::KMeans,
        "random" => InitMode::Random,
        other => return Err(CliError::Usage(format!("--init must be kmeans or random, got {other}"))),
    };
    if args.clusters < 2 {
        return Err(CliError::Usage("--k must be at least 2".into()));
    }
    if args.batch_writers < 2 || args.batch_patches < 2 {
        return Err(CliError::Usage("--batch-writers and --batch-patches must be at least 2".into()));
    }

    let mut flags = BTreeMap::from([
        ("k".to_string(), args.clusters.to_string()),
        ("margin".to_string(), args.margin.to_string()),
        ("lr".to_string(), args.learning_rate.to_string()),
        ("epochs".to_string(), args.epochs.to_string()),
        ("batch-writers".to_string(), args.batch_writers.to_string()),
        ("batch-patches".to_string(), args.batch_patches.to_string()),
        ("init".to_string(), args.init.clone()),
        ("alpha".to_string(), args.alpha.to_string()),
        ("val-fraction".to_string(), args.val_fraction.to_string()),
        ("seed".to_string(), args.seed.to_string()),
    ]);
    if args.early_stop {
        flags.insert("early-stop".to_string(), "true".to_string());
    }
    match (&args.desc, &args.patches) {
        (Some(d), None) => flags.insert("desc".to_string(), d.display().to_string()),
        (None, Some(p)) => flags.insert("patches".to_string(), p.display().to_string()),
        _ => return Err(CliError::Usage("exactly one of --desc or --patches is required".into())),
    };
    let mut manifest = RunManifest::new("train", flags);

    let sets = match (&args.desc, &args.patches) {
        (Some(dir), None) => load_desc_corpus(dir, &mut manifest)?,
        (None, Some(dir)) => load_patch_corpus(dir, args.seed, &mut manifest)?,
        _ => unreachable!(),
    };

    // Stack all descriptors as the initialization sample.
    let rows: Vec<Vec<f64>> = sets
        .iter()
        .flat_map(|s| (0..s.len()).map(|r| s.descriptors.row(r).to_vec()))
        .collect();
    let sample = Matrix::from_rows(&rows).map_err(|e| CliError::Data(e.to_string()))?;
    let mut init_rng = SeededRng::new(args.seed);
    let params = init_params(&sample, args.clusters, args.alpha, init_mode, &mut init_rng)
        .map_err(|e| match e {
            NetVladError::TooFewSamples { .. } => CliError::Data(e.to_string()),
            other => CliError::Data(other.to_string()),
        })?;

    let cfg = TrainConfig {
        margin: args.margin,
        learning_rate: args.learning_rate,
        batch_writers: args.batch_writers,
        batch_patches: args.batch_patches,
        epochs: args.epochs,
        seed: args.seed,
        val_fraction: args.val_fraction,
        early_stop: args.early_stop,
        ..TrainConfig::default()
    };
    let (trained, history) = if args.epochs == 0 {
        (params, penmark::training::LossHistory::default())
    } else {
        train(&sets, &params, &cfg).map_err(|e| match e {
            TrainingError::InsufficientWriters(_) => CliError::Data(e.to_string()),
            other => CliError::Data(other.to_string()),
        })?
    };

    ensure_out_dir(&args.out)?;
    write_params(&args.out.join("params.nvld"), &trained)
        .map_err(|e| CliError::Input(e.to_string()))?;
    std::fs::write(args.out.join("loss.csv"), history.to_csv())?;
    manifest.finish(&args.out, vec!["params.nvld".to_string(), "loss.csv".to_string()])?;

    match (history.epoch_means.first(), history.epoch_means.last()) {
        (Some(first), Some(last)) => {
            println!("trained {} epochs: mean loss {first:.6} -> {last:.6}", history.epoch_means.len());
        }
        _ => println!("wrote initialization parameters (0 epochs)"),
    }
    Ok(())
}
