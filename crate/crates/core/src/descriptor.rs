//! Local descriptors for patches.
//!
//! The descriptor source is pluggable: either the built-in seeded orthonormal
//! patch projection, or externally computed descriptors loaded from `DESC1`
//! files (one file per document).

use crate::numerics::{dot, Matrix, SeededRng};
use crate::page::{PatchSet, PATCH_SIDE};
use std::path::Path;
use thiserror::Error;

/// Default descriptor dimensionality.
pub const DEFAULT_DESCRIPTOR_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("bad magic: expected DESC1")]
    BadMagic,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("truncated input: {0}")]
    Truncated(&'static str),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("empty patch set")]
    EmptyPatchSet,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Local descriptors for one document: an N×D matrix plus identity labels.
#[derive(Debug, Clone)]
pub struct DescriptorSet {
    pub doc_id: String,
    pub writer_id: String,
    pub descriptors: Matrix,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.descriptors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.descriptors.cols()
    }
}

/// Fixed orthonormal projection from flattened patches to descriptor space.
///
/// Rows are drawn from a seeded Gaussian and orthonormalized by modified
/// Gram-Schmidt, so `P P^T = I` and the map never expands distances.
pub struct Projection {
    matrix: Matrix, // output_dim × input_dim, row-orthonormal
}

impl Projection {
    pub fn seeded(seed: u64, input_dim: usize, output_dim: usize) -> Self {
        assert!(output_dim <= input_dim, "projection cannot expand dimension");
        let mut rng = SeededRng::new(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(output_dim);
        while rows.len() < output_dim {
            let mut candidate: Vec<f64> = (0..input_dim).map(|_| rng.normal()).collect();
            for prev in &rows {
                let proj = dot(&candidate, prev);
                for (c, p) in candidate.iter_mut().zip(prev) {
                    *c -= proj * p;
                }
            }
            let norm = dot(&candidate, &candidate).sqrt();
            if norm < 1e-8 {
                continue; // degenerate draw, take a fresh one
            }
            for c in &mut candidate {
                *c /= norm;
            }
            rows.push(candidate);
        }
        Self { matrix: Matrix::from_rows(&rows).expect("orthonormal rows are finite") }
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Mean-subtracts the flattened patch and projects it to descriptor space.
    pub fn apply(&self, patch: &[f32]) -> Vec<f64> {
        assert_eq!(patch.len(), self.input_dim());
        let mean = patch.iter().map(|&v| f64::from(v)).sum::<f64>() / patch.len() as f64;
        let centered: Vec<f64> = patch.iter().map(|&v| f64::from(v) - mean).collect();
        self.matrix.mul_vec(&centered)
    }
}

/// Projects every patch of a set to a descriptor with the seeded fixed
/// projection (patch mean removed first).
pub fn project_patches(patches: &PatchSet, proj_seed: u64) -> Result<DescriptorSet, DescriptorError> {
    let projection = Projection::seeded(proj_seed, PATCH_SIDE * PATCH_SIDE, DEFAULT_DESCRIPTOR_DIM);
    project_with(&projection, &patches.doc_id, &patches.writer_id, &patches.patches)
}

/// Same as [`project_patches`] but reuses an existing projection; this is the
/// path for corpora where building the projection once matters.
pub fn project_with(
    projection: &Projection,
    doc_id: &str,
    writer_id: &str,
    patches: &[Vec<f32>],
) -> Result<DescriptorSet, DescriptorError> {
    if patches.is_empty() {
        return Err(DescriptorError::EmptyPatchSet);
    }
    let rows: Vec<Vec<f64>> = patches.iter().map(|p| projection.apply(p)).collect();
    let descriptors = Matrix::from_rows(&rows)
        .map_err(|e| DescriptorError::Malformed(format!("projected descriptors: {e}")))?;
    Ok(DescriptorSet {
        doc_id: doc_id.to_string(),
        writer_id: writer_id.to_string(),
        descriptors,
    })
}

fn check_id(id: &str, what: &str) -> Result<(), DescriptorError> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(DescriptorError::Malformed(format!(
            "{what} must be non-empty and contain no whitespace: {id:?}"
        )));
    }
    Ok(())
}

/// Serializes a descriptor set in `DESC1` format: magic `DESC1\n`, ASCII
/// header `doc_id writer_id N D\n`, then N·D little-endian f32, row-major.
pub fn encode_desc(set: &DescriptorSet) -> Result<Vec<u8>, DescriptorError> {
    check_id(&set.doc_id, "doc_id")?;
    check_id(&set.writer_id, "writer_id")?;
    let mut out = format!(
        "DESC1\n{} {} {} {}\n",
        set.doc_id,
        set.writer_id,
        set.len(),
        set.dim()
    )
    .into_bytes();
    for v in set.descriptors.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses a `DESC1` byte stream.
pub fn parse_desc(bytes: &[u8]) -> Result<DescriptorSet, DescriptorError> {
    let magic = b"DESC1\n";
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(DescriptorError::BadMagic);
    }
    let rest = &bytes[magic.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(DescriptorError::Truncated("header line"))?;
    let header = std::str::from_utf8(&rest[..nl])
        .map_err(|_| DescriptorError::Malformed("header not utf-8".into()))?;
    let fields: Vec<&str> = header.split_ascii_whitespace().collect();
    if fields.len() != 4 {
        return Err(DescriptorError::Malformed(format!(
            "header needs 4 fields, got {}",
            fields.len()
        )));
    }
    let doc_id = fields[0].to_string();
    let writer_id = fields[1].to_string();
    let n: usize = fields[2]
        .parse()
        .map_err(|_| DescriptorError::Malformed("N not a number".into()))?;
    let d: usize = fields[3]
        .parse()
        .map_err(|_| DescriptorError::Malformed("D not a number".into()))?;
    if n == 0 || d == 0 {
        return Err(DescriptorError::DimMismatch(format!("N={n}, D={d}")));
    }
    let payload = &rest[nl + 1..];
    if payload.len() < n * d * 4 {
        return Err(DescriptorError::Truncated("descriptor payload"));
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n * d {
        let off = i * 4;
        data.push(f64::from(f32::from_le_bytes(
            payload[off..off + 4].try_into().unwrap(),
        )));
    }
    let descriptors = Matrix::new(n, d, data)
        .map_err(|e| DescriptorError::Malformed(format!("payload: {e}")))?;
    Ok(DescriptorSet { doc_id, writer_id, descriptors })
}

pub fn write_desc(path: &Path, set: &DescriptorSet) -> Result<(), DescriptorError> {
    std::fs::write(path, encode_desc(set)?)?;
    Ok(())
}

pub fn read_desc(path: &Path) -> Result<DescriptorSet, DescriptorError> {
    parse_desc(&std::fs::read(path)?)
}

/// Loads every `.desc` file in a directory (sorted by filename) and checks
/// that all sets share the same descriptor dimension.
pub fn read_desc_dir(dir: &Path) -> Result<Vec<DescriptorSet>, DescriptorError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "desc"))
        .collect();
    paths.sort();
    let mut sets = Vec::with_capacity(paths.len());
    for path in paths {
        sets.push(read_desc(&path)?);
    }
    if let Some(first) = sets.first() {
        let d = first.dim();
        for s in &sets {
            if s.dim() != d {
                return Err(DescriptorError::DimMismatch(format!(
                    "corpus mixes D={d} and D={} ({})",
                    s.dim(),
                    s.doc_id
                )));
            }
        }
    }
    Ok(sets)
}
