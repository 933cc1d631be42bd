//! `penmark evaluate`: global descriptors in, ranked lists and an
//! evaluation report out, optionally with krNN query-expansion re-ranking.

use crate::commands::sorted_files_with_ext;
use crate::error::{CliError, CliResult};
use crate::manifest::{ensure_out_dir, RunManifest};
use penmark::encoding::read_gdsc_dir;
use penmark::retrieval::{
    evaluate, rank_all, ranked_lists_to_tsv, rerank, Gallery, RetrievalError,
};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    /// Directory of GDSC1 global descriptor files.
    #[arg(long)]
    pub globals: PathBuf,
    /// `none` for the initial ranking, or a positive k for krNN query
    /// expansion re-ranking.
    #[arg(long, default_value = "2")]
    pub rerank: String,
    /// Output directory (ranked.tsv, report.tsv, report.txt, manifest.json).
    #[arg(long)]
    pub out: PathBuf,
}

fn map_retrieval_error(e: RetrievalError) -> CliError {
    match e {
        RetrievalError::EmptyGallery(_) => CliError::Gallery(e.to_string()),
        RetrievalError::KOutOfRange { .. } => CliError::Usage(e.to_string()),
        RetrievalError::DimMismatch(_) => CliError::Shape(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

pub fn run(args: &EvaluateArgs) -> CliResult<()> {
    let rerank_k: Option<usize> = match args.rerank.as_str() {
        "none" => None,
        text => Some(
            text.parse::<usize>()
                .ok()
                .filter(|&k| k >= 1)
                .ok_or_else(|| {
                    CliError::Usage(format!("--rerank must be none or a positive integer, got {text}"))
                })?,
        ),
    };

    let mut manifest = RunManifest::new(
        "evaluate",
        BTreeMap::from([
            ("globals".to_string(), args.globals.display().to_string()),
            ("rerank".to_string(), args.rerank.clone()),
        ]),
    );
    for file in sorted_files_with_ext(&args.globals, "gdsc")? {
        manifest.record_input(&file)?;
    }

    let docs = read_gdsc_dir(&args.globals).map_err(|e| CliError::Input(e.to_string()))?;
    if docs.len() < 2 {
        return Err(CliError::Gallery(format!(
            "gallery needs at least 2 documents, found {} in {}",
            docs.len(),
            args.globals.display()
        )));
    }
    let gallery = Gallery::new(docs).map_err(map_retrieval_error)?;
    let labels = gallery.labels();

    let lists = match rerank_k {
        None => rank_all(&gallery).map_err(map_retrieval_error)?,
        Some(k) => rerank(&gallery, k).map_err(map_retrieval_error)?,
    };
    let report = evaluate(&lists, &labels).map_err(map_retrieval_error)?;

    ensure_out_dir(&args.out)?;
    std::fs::write(args.out.join("ranked.tsv"), ranked_lists_to_tsv(&lists))?;
    std::fs::write(args.out.join("report.tsv"), report.to_tsv_line())?;
    std::fs::write(args.out.join("report.txt"), report.summary() + "\n")?;
    manifest.finish(
        &args.out,
        vec!["ranked.tsv".to_string(), "report.tsv".to_string(), "report.txt".to_string()],
    )?;
    println!("{}", report.summary());
    Ok(())
}
