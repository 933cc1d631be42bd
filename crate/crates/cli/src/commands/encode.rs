//! `penmark encode`: descriptor sets in, one global descriptor per document
//! out, optionally fitting or applying a PCA whitening model.

use crate::commands::sorted_files_with_ext;
use crate::error::{CliError, CliResult};
use crate::manifest::{ensure_out_dir, RunManifest};
use penmark::descriptor::read_desc_dir;
use penmark::encoding::{
    encode_document, encode_gdsc, pca_fit, pca_transform, read_pca, write_pca, EncodingError,
    GlobalDescriptor, Pooling,
};
use penmark::netvlad::read_params;
use penmark::numerics::Matrix;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, clap::Args)]
pub struct EncodeArgs {
    /// Directory of DESC1 descriptor files.
    #[arg(long)]
    pub desc: PathBuf,
    /// Trained NVLD1 parameter file.
    #[arg(long)]
    pub params: PathBuf,
    /// Aggregation: gmp or sum.
    #[arg(long, default_value = "gmp")]
    pub pooling: String,
    /// GMP ridge regularizer.
    #[arg(long, default_value_t = 1000.0)]
    pub lambda: f64,
    /// Power normalization exponent.
    #[arg(long = "p", default_value_t = 0.5)]
    pub power: f64,
    /// Fit a PCA whitening model on this corpus and write model.pca1.
    #[arg(long = "pca-fit")]
    pub pca_fit: bool,
    /// Apply an existing PCA1 model instead of fitting one.
    #[arg(long = "pca-model")]
    pub pca_model: Option<PathBuf>,
    /// PCA output dimensionality (used with --pca-fit).
    #[arg(long, default_value_t = 128)]
    pub dimension: usize,
    /// Disable whitening when fitting PCA.
    #[arg(long = "no-whiten")]
    pub no_whiten: bool,
    /// Output directory (one .gdsc per document, manifest.json).
    #[arg(long)]
    pub out: PathBuf,
}

fn map_encoding_error(e: EncodingError) -> CliError {
    match e {
        EncodingError::DimensionTooLarge { .. } => CliError::Shape(e.to_string()),
        EncodingError::DimMismatch(_) => CliError::Shape(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

pub fn run(args: &EncodeArgs) -> CliResult<()> {
    let pooling = match args.pooling.as_str() {
        "gmp" => Pooling::Gmp { lambda: args.lambda },
        "sum" => Pooling::Sum,
        other => return Err(CliError::Usage(format!("--pooling must be gmp or sum, got {other}"))),
    };
    if args.pca_fit && args.pca_model.is_some() {
        return Err(CliError::Usage("--pca-fit conflicts with --pca-model".into()));
    }

    let mut flags = BTreeMap::from([
        ("desc".to_string(), args.desc.display().to_string()),
        ("params".to_string(), args.params.display().to_string()),
        ("pooling".to_string(), args.pooling.clone()),
        ("lambda".to_string(), args.lambda.to_string()),
        ("p".to_string(), args.power.to_string()),
    ]);
    if args.pca_fit {
        flags.insert("pca-fit".to_string(), "true".to_string());
        flags.insert("dimension".to_string(), args.dimension.to_string());
        if args.no_whiten {
            flags.insert("no-whiten".to_string(), "true".to_string());
        }
    }
    if let Some(model) = &args.pca_model {
        flags.insert("pca-model".to_string(), model.display().to_string());
    }
    let mut manifest = RunManifest::new("encode", flags);
    manifest.record_input(&args.params)?;
    for file in sorted_files_with_ext(&args.desc, "desc")? {
        manifest.record_input(&file)?;
    }

    let params = read_params(&args.params)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.params.display())))?;
    let sets = read_desc_dir(&args.desc).map_err(|e| match e {
        penmark::descriptor::DescriptorError::DimMismatch(_) => CliError::Shape(e.to_string()),
        other => CliError::Input(other.to_string()),
    })?;
    if sets.is_empty() {
        return Err(CliError::Input(format!("no DESC1 files in {}", args.desc.display())));
    }
    for set in &sets {
        if set.dim() != params.dim() {
            return Err(CliError::Shape(format!(
                "descriptors have D={}, parameters expect D={}",
                set.dim(),
                params.dim()
            )));
        }
    }

    // Pool every document in parallel; order follows the sorted input files.
    let pooled: Vec<GlobalDescriptor> = sets
        .par_iter()
        .map(|set| encode_document(set, &params, pooling, args.power, None).map_err(map_encoding_error))
        .collect::<CliResult<_>>()?;

    ensure_out_dir(&args.out)?;
    let mut outputs = Vec::new();

    let finals: Vec<GlobalDescriptor> = if args.pca_fit {
        let rows: Vec<Vec<f64>> = pooled.iter().map(|g| g.vector.clone()).collect();
        let train = Matrix::from_rows(&rows).map_err(|e| CliError::Data(e.to_string()))?;
        let model = pca_fit(&train, args.dimension, !args.no_whiten).map_err(map_encoding_error)?;
        write_pca(&args.out.join("model.pca1"), &model).map_err(map_encoding_error)?;
        outputs.push("model.pca1".to_string());
        pooled
            .par_iter()
            .map(|g| pca_transform(&model, g).map_err(map_encoding_error))
            .collect::<CliResult<_>>()?
    } else if let Some(model_path) = &args.pca_model {
        manifest.record_input(model_path)?;
        let model = read_pca(model_path)
            .map_err(|e| CliError::Input(format!("{}: {e}", model_path.display())))?;
        pooled
            .par_iter()
            .map(|g| pca_transform(&model, g).map_err(map_encoding_error))
            .collect::<CliResult<_>>()?
    } else {
        pooled
    };

    for g in &finals {
        let name = format!("{}.gdsc", g.doc_id);
        let bytes = encode_gdsc(g).map_err(map_encoding_error)?;
        std::fs::write(args.out.join(&name), bytes)?;
        outputs.push(name);
    }
    manifest.finish(&args.out, outputs)?;
    println!(
        "encoded {} documents (E={}) to {}",
        finals.len(),
        finals.first().map_or(0, |g| g.vector.len()),
        args.out.display()
    );
    Ok(())
}
