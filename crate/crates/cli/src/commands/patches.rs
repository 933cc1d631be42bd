//! `penmark patches`: PGM pages in, one PTCH patch dump per page out.

use crate::commands::{file_stem, sorted_files_with_ext};
use crate::error::{CliError, CliResult};
use crate::manifest::{ensure_out_dir, RunManifest};
use penmark::numerics::SeededRng;
use penmark::page::{extract_patches, load_pgm, write_ptch};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, clap::Args)]
pub struct PatchesArgs {
    /// Directory of PGM page images.
    #[arg(long)]
    pub input: std::path::PathBuf,
    /// TSV mapping page filename to writer id.
    #[arg(long)]
    pub labels: std::path::PathBuf,
    /// Keep every stride-th contour pixel.
    #[arg(long, default_value_t = 3)]
    pub stride: usize,
    /// Cap on patches per page (seeded subsampling beyond it).
    #[arg(long = "max-patches", default_value_t = 25_000)]
    pub max_patches: usize,
    /// Treat light-on-dark pages as ink-on-paper.
    #[arg(long)]
    pub invert: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (PTCH files, labels.tsv, manifest.json).
    #[arg(long)]
    pub out: std::path::PathBuf,
}

/// Parses a TSV of `filename<TAB>writer` rows.
pub fn read_labels(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(file), Some(writer)) = (fields.next(), fields.next()) else {
            return Err(CliError::Input(format!(
                "{}:{}: expected filename<TAB>writer",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(file.to_string(), writer.to_string());
    }
    Ok(map)
}

pub fn run(args: &PatchesArgs) -> CliResult<()> {
    if args.stride < 1 {
        return Err(CliError::Usage("--stride must be at least 1".into()));
    }
    let pages = sorted_files_with_ext(&args.input, "pgm")?;
    if pages.is_empty() {
        return Err(CliError::Input(format!("no input pages in {}", args.input.display())));
    }
    let labels = read_labels(&args.labels)?;
    for page in &pages {
        let name = page.file_name().unwrap_or_default().to_string_lossy();
        if !labels.contains_key(name.as_ref()) {
            return Err(CliError::Input(format!("no writer label for {name}")));
        }
    }

    ensure_out_dir(&args.out)?;
    let mut manifest = RunManifest::new(
        "patches",
        BTreeMap::from([
            ("input".to_string(), args.input.display().to_string()),
            ("labels".to_string(), args.labels.display().to_string()),
            ("stride".to_string(), args.stride.to_string()),
            ("max-patches".to_string(), args.max_patches.to_string()),
            ("invert".to_string(), args.invert.to_string()),
            ("seed".to_string(), args.seed.to_string()),
        ]),
    );
    manifest.record_input(&args.labels)?;
    for page in &pages {
        manifest.record_input(page)?;
    }

    // Per-page seeds are drawn up front in sorted page order, so the result
    // does not depend on the worker pool size.
    let mut master = SeededRng::new(args.seed);
    let page_seeds: Vec<u64> = pages.iter().map(|_| master.next_u64()).collect();

    let results: Vec<CliResult<(String, String, usize)>> = pages
        .par_iter()
        .zip(page_seeds)
        .map(|(page, page_seed)| {
            let name = page.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let stem = file_stem(page);
            let bytes = std::fs::read(page)
                .map_err(|e| CliError::Input(format!("{name}: {e}")))?;
            let mut img =
                load_pgm(&bytes).map_err(|e| CliError::Input(format!("{name}: {e}")))?;
            if args.invert {
                img = img.inverted();
            }
            let mut rng = SeededRng::new(page_seed);
            let set = extract_patches(&img, args.stride, args.max_patches, &mut rng)
                .map_err(|e| CliError::Data(format!("{name}: {e}")))?;
            let out_path = args.out.join(format!("{stem}.ptch"));
            std::fs::write(&out_path, write_ptch(&set.patches))
                .map_err(|e| CliError::Input(format!("{}: {e}", out_path.display())))?;
            Ok((stem, labels[name.as_str()].clone(), set.patches.len()))
        })
        .collect();

    let mut outputs = Vec::new();
    let mut label_rows = String::new();
    let mut total = 0usize;
    for r in results {
        let (stem, writer, count) = r?;
        label_rows.push_str(&format!("{stem}\t{writer}\n"));
        outputs.push(format!("{stem}.ptch"));
        total += count;
    }
    std::fs::write(args.out.join("labels.tsv"), label_rows)?;
    outputs.push("labels.tsv".to_string());

    manifest.finish(&args.out, outputs)?;
    println!("wrote {total} patches across {} pages to {}", pages.len(), args.out.display());
    Ok(())
}
