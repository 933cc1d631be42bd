//! Seeded synthetic writer corpora: Gaussian descriptor clusters with
//! controllable separation, used by benchmarks and end-to-end tests.

use crate::descriptor::DescriptorSet;
use crate::numerics::{Matrix, SeededRng};

/// Corpus shape and geometry.
///
/// Writer cluster centers are drawn i.i.d. Gaussian and scaled so the
/// expected distance between two centers equals `separation * noise`;
/// descriptors then scatter around their writer's center with per-coordinate
/// standard deviation `noise`. `separation` therefore measures how far apart
/// writers sit in units of the descriptor noise.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub writers: usize,
    pub docs_per_writer: usize,
    pub descriptors_per_doc: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            writers: 20,
            docs_per_writer: 4,
            descriptors_per_doc: 50,
            dim: 64,
            separation: 5.0,
            noise: 1.0,
            seed: 42,
        }
    }
}

/// Generates the corpus deterministically: writer-major, document-major,
/// descriptor-major draw order over a single seeded stream.
pub fn generate(cfg: &SynthConfig) -> Vec<DescriptorSet> {
    assert!(cfg.writers >= 1 && cfg.docs_per_writer >= 1 && cfg.descriptors_per_doc >= 1);
    assert!(cfg.dim >= 1);
    let mut rng = SeededRng::new(cfg.seed);

    // E||c_i - c_j||^2 = 2 * scale^2 * dim for i.i.d. N(0, scale^2) centers.
    let center_scale = cfg.separation * cfg.noise / (2.0 * cfg.dim as f64).sqrt();
    let centers: Vec<Vec<f64>> = (0..cfg.writers)
        .map(|_| (0..cfg.dim).map(|_| center_scale * rng.normal()).collect())
        .collect();

    let mut sets = Vec::with_capacity(cfg.writers * cfg.docs_per_writer);
    for (w, center) in centers.iter().enumerate() {
        let writer_id = format!("w{w:03}");
        for doc in 0..cfg.docs_per_writer {
            let mut rows = Vec::with_capacity(cfg.descriptors_per_doc);
            for _ in 0..cfg.descriptors_per_doc {
                let row: Vec<f64> =
                    center.iter().map(|c| c + cfg.noise * rng.normal()).collect();
                rows.push(row);
            }
            sets.push(DescriptorSet {
                doc_id: format!("{writer_id}_d{doc:02}"),
                writer_id: writer_id.clone(),
                descriptors: Matrix::from_rows(&rows).expect("finite draws"),
            });
        }
    }
    sets
}
