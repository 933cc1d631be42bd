//! Document-level encoding: pool per-descriptor embeddings into one global
//! descriptor, power-normalize, and optionally PCA-whiten.
//!
//! Generalized max-pooling solves a ridge regression so every embedding has
//! the same dot product with the pooled vector, which damps the influence of
//! frequently repeated (bursty) descriptors; sum-pooling is the plain
//! baseline. Stage order is fixed: pool, power norm, l2, PCA, l2.

use crate::descriptor::DescriptorSet;
use crate::netvlad::{embed, normalize_l2, NetVladError, NetVladParams};
use crate::numerics::{dot, ridge_solve, sym_eig, Matrix, NumericsError};
use std::path::Path;
use thiserror::Error;

/// Default GMP regularizer.
pub const DEFAULT_GMP_LAMBDA: f64 = 1000.0;
/// Default power-normalization exponent (signed square root).
pub const DEFAULT_POWER: f64 = 0.5;
/// Default PCA output dimensionality.
pub const DEFAULT_PCA_DIM: usize = 128;

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("requested dimension {requested} exceeds usable rank {rank}")]
    DimensionTooLarge { requested: usize, rank: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("bad magic: {0}")]
    BadMagic(&'static str),
    #[error("truncated input: {0}")]
    Truncated(&'static str),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Embed(#[from] NetVladError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One document's aggregated descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub doc_id: String,
    pub writer_id: String,
    pub vector: Vec<f64>,
}

/// Aggregation strategy for per-descriptor embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pooling {
    Sum,
    Gmp { lambda: f64 },
}

/// Column-wise sum of embedding rows.
pub fn sum_pool(embeddings: &Matrix) -> Vec<f64> {
    assert!(embeddings.rows() >= 1, "sum_pool needs at least one embedding");
    let e = embeddings.cols();
    let mut out = vec![0.0f64; e];
    for r in 0..embeddings.rows() {
        for (o, v) in out.iter_mut().zip(embeddings.row(r)) {
            *o += v;
        }
    }
    out
}

/// Generalized max-pooling, solved in the dual: with gram G of the N
/// embeddings, solve `(G + lambda*I) a = 1` and return `sum_i a_i * phi_i`.
/// The result satisfies the primal normal equations
/// `(Phi Phi^T + lambda*I) xi = Phi 1` to solver precision.
pub fn gmp_pool(embeddings: &Matrix, lambda: f64) -> Result<Vec<f64>, EncodingError> {
    let n = embeddings.rows();
    assert!(n >= 1, "gmp_pool needs at least one embedding");
    if !embeddings.is_finite() || !lambda.is_finite() {
        return Err(EncodingError::NonFinite);
    }
    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let g = dot(embeddings.row(i), embeddings.row(j));
            gram.set(i, j, g);
            gram.set(j, i, g);
        }
    }
    let coeffs = ridge_solve(&gram, &vec![1.0; n], lambda)?;
    let e = embeddings.cols();
    let mut out = vec![0.0f64; e];
    for (i, &a) in coeffs.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(embeddings.row(i)) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Power normalization: elementwise `sign(v) * |v|^p`, then l2 normalization
/// (zero-guarded).
pub fn power_norm(v: &[f64], p: f64) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().map(|&x| x.signum() * x.abs().powf(p)).collect();
    normalize_l2(&mut out);
    out
}

/// Whitening PCA model fit on training global descriptors.
#[derive(Debug, Clone)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// dimension × E, row-orthonormal.
    pub components: Matrix,
    /// Per-component whitening scales `1/sqrt(lambda_i + 1e-12)`; all ones
    /// when whitening is disabled.
    pub scales: Vec<f64>,
}

const PCA_EIG_EPS: f64 = 1e-12;

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.components.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    /// Centers, projects, and whitens without the final l2 normalization.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>, EncodingError> {
        if v.len() != self.input_dim() {
            return Err(EncodingError::DimMismatch(format!(
                "vector has {} entries, model expects {}",
                v.len(),
                self.input_dim()
            )));
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let mut out = self.components.mul_vec(&centered);
        for (o, s) in out.iter_mut().zip(&self.scales) {
            *o *= s;
        }
        Ok(out)
    }
}

/// Fits a PCA model on the rows of `train`, keeping the top `dimension`
/// components. The eigenproblem runs on the smaller side (the M×M gram when
/// there are fewer samples than dimensions). Rank-deficient requests fail
/// with the usable rank in the error.
pub fn pca_fit(train: &Matrix, dimension: usize, whiten: bool) -> Result<PcaModel, EncodingError> {
    let m = train.rows();
    let e = train.cols();
    if m < 2 {
        return Err(EncodingError::Malformed(format!("PCA needs at least 2 samples, got {m}")));
    }
    if !train.is_finite() {
        return Err(EncodingError::NonFinite);
    }
    let hard_cap = (m - 1).min(e);
    if dimension == 0 || dimension > hard_cap {
        return Err(EncodingError::DimensionTooLarge { requested: dimension, rank: hard_cap });
    }

    let mut mean = vec![0.0f64; e];
    for r in 0..m {
        for (s, v) in mean.iter_mut().zip(train.row(r)) {
            *s += v;
        }
    }
    for s in &mut mean {
        *s /= m as f64;
    }
    let centered: Vec<Vec<f64>> = (0..m)
        .map(|r| train.row(r).iter().zip(&mean).map(|(v, mu)| v - mu).collect())
        .collect();

    let norm = (m - 1) as f64;
    let (eigenvalues, component_rows): (Vec<f64>, Vec<Vec<f64>>) = if m < e {
        // Gram side: eigenvectors of X X^T / (M-1) map to covariance
        // eigenvectors via X^T u / sqrt((M-1) * lambda).
        let mut gram = Matrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let g = dot(&centered[i], &centered[j]) / norm;
                gram.set(i, j, g);
                gram.set(j, i, g);
            }
        }
        let (vals, vecs) = sym_eig(&gram)?;
        let mut rows = Vec::with_capacity(vals.len());
        for (idx, &lambda) in vals.iter().enumerate() {
            let mut v = vec![0.0f64; e];
            for i in 0..m {
                let u = vecs.get(i, idx);
                for (dst, src) in v.iter_mut().zip(&centered[i]) {
                    *dst += u * src;
                }
            }
            let scale = (norm * lambda.max(0.0)).sqrt();
            if scale > 0.0 {
                for x in &mut v {
                    *x /= scale;
                }
            }
            rows.push(v);
        }
        (vals, rows)
    } else {
        let mut cov = Matrix::zeros(e, e);
        for i in 0..e {
            for j in i..e {
                let mut s = 0.0;
                for row in &centered {
                    s += row[i] * row[j];
                }
                cov.set(i, j, s / norm);
                cov.set(j, i, s / norm);
            }
        }
        let (vals, vecs) = sym_eig(&cov)?;
        let rows = (0..vals.len())
            .map(|idx| (0..e).map(|i| vecs.get(i, idx)).collect())
            .collect();
        (vals, rows)
    };

    let lambda_max = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let rank_tol = (lambda_max * 1e-9).max(PCA_EIG_EPS);
    let rank = eigenvalues.iter().take(hard_cap).filter(|&&l| l > rank_tol).count();
    if dimension > rank {
        return Err(EncodingError::DimensionTooLarge { requested: dimension, rank });
    }

    let mut rows: Vec<Vec<f64>> = component_rows.into_iter().take(dimension).collect();
    // Deterministic sign: first component above 1e-12 in magnitude positive.
    for row in &mut rows {
        if let Some(first) = row.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                for x in row.iter_mut() {
                    *x = -*x;
                }
            }
        }
    }
    let scales: Vec<f64> = eigenvalues
        .iter()
        .take(dimension)
        .map(|&l| if whiten { 1.0 / (l.max(0.0) + PCA_EIG_EPS).sqrt() } else { 1.0 })
        .collect();

    Ok(PcaModel {
        mean,
        components: Matrix::from_rows(&rows)?,
        scales,
    })
}

/// Applies the PCA model and l2-normalizes (zero-guarded).
pub fn pca_transform(model: &PcaModel, g: &GlobalDescriptor) -> Result<GlobalDescriptor, EncodingError> {
    let mut vector = model.project(&g.vector)?;
    normalize_l2(&mut vector);
    Ok(GlobalDescriptor {
        doc_id: g.doc_id.clone(),
        writer_id: g.writer_id.clone(),
        vector,
    })
}

/// Full document encoding: embed every descriptor, pool, power-normalize
/// (which ends in l2), then optionally PCA-transform (which ends in l2).
pub fn encode_document(
    set: &DescriptorSet,
    params: &NetVladParams,
    pooling: Pooling,
    power: f64,
    pca: Option<&PcaModel>,
) -> Result<GlobalDescriptor, EncodingError> {
    let n = set.len();
    if n == 0 {
        return Err(EncodingError::Malformed(format!("document {} has no descriptors", set.doc_id)));
    }
    let e = params.embedding_len();
    let mut data = Vec::with_capacity(n * e);
    for r in 0..n {
        data.extend_from_slice(embed(params, set.descriptors.row(r))?.as_slice());
    }
    let embeddings = Matrix::new(n, e, data).map_err(EncodingError::Numerics)?;
    let pooled = match pooling {
        Pooling::Sum => sum_pool(&embeddings),
        Pooling::Gmp { lambda } => gmp_pool(&embeddings, lambda)?,
    };
    let normalized = power_norm(&pooled, power);
    let global = GlobalDescriptor {
        doc_id: set.doc_id.clone(),
        writer_id: set.writer_id.clone(),
        vector: normalized,
    };
    match pca {
        Some(model) => pca_transform(model, &global),
        None => Ok(global),
    }
}

fn check_id(id: &str, what: &str) -> Result<(), EncodingError> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(EncodingError::Malformed(format!(
            "{what} must be non-empty and contain no whitespace: {id:?}"
        )));
    }
    Ok(())
}

/// Serializes one global descriptor in `GDSC1` format: magic `GDSC1\n`,
/// header `doc_id writer_id E\n`, then E little-endian f32 values. Records
/// may be concatenated in one stream.
pub fn encode_gdsc(g: &GlobalDescriptor) -> Result<Vec<u8>, EncodingError> {
    check_id(&g.doc_id, "doc_id")?;
    check_id(&g.writer_id, "writer_id")?;
    let mut out = format!("GDSC1\n{} {} {}\n", g.doc_id, g.writer_id, g.vector.len()).into_bytes();
    for v in &g.vector {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses a stream of concatenated `GDSC1` records.
pub fn parse_gdsc_stream(bytes: &[u8]) -> Result<Vec<GlobalDescriptor>, EncodingError> {
    let magic = b"GDSC1\n";
    let mut pos = 0usize;
    let mut out = Vec::new();
    while pos < bytes.len() {
        if bytes.len() - pos < magic.len() || &bytes[pos..pos + magic.len()] != magic {
            return Err(EncodingError::BadMagic("expected GDSC1"));
        }
        pos += magic.len();
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(EncodingError::Truncated("header line"))?;
        let header = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| EncodingError::Malformed("header not utf-8".into()))?;
        pos += nl + 1;
        let fields: Vec<&str> = header.split_ascii_whitespace().collect();
        if fields.len() != 3 {
            return Err(EncodingError::Malformed("header needs doc_id writer_id E".into()));
        }
        let e: usize = fields[2]
            .parse()
            .map_err(|_| EncodingError::Malformed("E not a number".into()))?;
        if bytes.len() - pos < e * 4 {
            return Err(EncodingError::Truncated("descriptor payload"));
        }
        let vector: Vec<f64> = (0..e)
            .map(|i| {
                f64::from(f32::from_le_bytes(
                    bytes[pos + i * 4..pos + i * 4 + 4].try_into().unwrap(),
                ))
            })
            .collect();
        pos += e * 4;
        out.push(GlobalDescriptor {
            doc_id: fields[0].to_string(),
            writer_id: fields[1].to_string(),
            vector,
        });
    }
    Ok(out)
}

pub fn write_gdsc(path: &Path, g: &GlobalDescriptor) -> Result<(), EncodingError> {
    std::fs::write(path, encode_gdsc(g)?)?;
    Ok(())
}

/// Loads every `.gdsc` file in a directory (sorted by filename; each file may
/// hold one record or a concatenated stream).
pub fn read_gdsc_dir(dir: &Path) -> Result<Vec<GlobalDescriptor>, EncodingError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "gdsc"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for path in paths {
        out.extend(parse_gdsc_stream(&std::fs::read(&path)?)?);
    }
    Ok(out)
}

/// Serializes a PCA model in `PCA1` format: magic `PCA1\n`, header
/// `dimension E\n`, then mean (E), components (dimension·E row-major), and
/// scales (dimension), all little-endian f32.
pub fn encode_pca(model: &PcaModel) -> Vec<u8> {
    let mut out = format!("PCA1\n{} {}\n", model.output_dim(), model.input_dim()).into_bytes();
    for v in &model.mean {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for v in model.components.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for v in &model.scales {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Parses a `PCA1` byte stream.
pub fn parse_pca(bytes: &[u8]) -> Result<PcaModel, EncodingError> {
    let magic = b"PCA1\n";
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(EncodingError::BadMagic("expected PCA1"));
    }
    let rest = &bytes[magic.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(EncodingError::Truncated("header line"))?;
    let header = std::str::from_utf8(&rest[..nl])
        .map_err(|_| EncodingError::Malformed("header not utf-8".into()))?;
    let fields: Vec<&str> = header.split_ascii_whitespace().collect();
    if fields.len() != 2 {
        return Err(EncodingError::Malformed("header needs dimension and E".into()));
    }
    let dimension: usize = fields[0]
        .parse()
        .map_err(|_| EncodingError::Malformed("dimension not a number".into()))?;
    let e: usize = fields[1]
        .parse()
        .map_err(|_| EncodingError::Malformed("E not a number".into()))?;
    let payload = &rest[nl + 1..];
    let need = (e + dimension * e + dimension) * 4;
    if payload.len() < need {
        return Err(EncodingError::Truncated("model payload"));
    }
    let read_f32 = |i: usize| -> f64 {
        f64::from(f32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().unwrap()))
    };
    let mean: Vec<f64> = (0..e).map(read_f32).collect();
    let comp_data: Vec<f64> = (e..e + dimension * e).map(read_f32).collect();
    let scales: Vec<f64> = (e + dimension * e..e + dimension * e + dimension)
        .map(read_f32)
        .collect();
    Ok(PcaModel {
        mean,
        components: Matrix::new(dimension, e, comp_data)?,
        scales,
    })
}

pub fn write_pca(path: &Path, model: &PcaModel) -> Result<(), EncodingError> {
    std::fs::write(path, encode_pca(model))?;
    Ok(())
}

pub fn read_pca(path: &Path) -> Result<PcaModel, EncodingError> {
    parse_pca(&std::fs::read(path)?)
}
