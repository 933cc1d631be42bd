//! Metric learning for the embedding layer: semi-hard triplet mining,
//! hinge triplet loss, and an Adamax optimizer driving seeded batches.

use crate::descriptor::DescriptorSet;
use crate::netvlad::{embed, embed_backward, NetVladError, NetVladParams};
use crate::numerics::{dot, Matrix, SeededRng};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("no pair yields a triplet under the mining rule")]
    NoValidTriplets,
    #[error("training needs at least 2 writers with 2 patches each, found {0}")]
    InsufficientWriters(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Embed(#[from] NetVladError),
}

/// One training batch: row-per-sample embeddings with writer labels.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
}

impl TripletBatch {
    /// Validates the batch: at least two distinct writers, and at least one
    /// writer contributing two or more samples.
    pub fn new(embeddings: Matrix, labels: Vec<usize>) -> Result<Self, TrainingError> {
        if labels.len() != embeddings.rows() {
            return Err(TrainingError::ShapeMismatch(format!(
                "{} labels for {} embeddings",
                labels.len(),
                embeddings.rows()
            )));
        }
        let mut counts = BTreeMap::new();
        for &l in &labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        if counts.len() < 2 || !counts.values().any(|&c| c >= 2) {
            return Err(TrainingError::InsufficientWriters(counts.len()));
        }
        Ok(Self { embeddings, labels })
    }
}

/// All pairwise squared Euclidean distances between rows: symmetric, zero
/// diagonal, entries clamped at zero.
pub fn pairwise_sq_dist(embeddings: &Matrix) -> Result<Matrix, TrainingError> {
    if !embeddings.is_finite() {
        return Err(TrainingError::NonFinite);
    }
    let b = embeddings.rows();
    let norms: Vec<f64> = (0..b).map(|i| dot(embeddings.row(i), embeddings.row(i))).collect();
    let mut dist = Matrix::zeros(b, b);
    for i in 0..b {
        for j in (i + 1)..b {
            let d = (norms[i] + norms[j] - 2.0 * dot(embeddings.row(i), embeddings.row(j))).max(0.0);
            dist.set(i, j, d);
            dist.set(j, i, d);
        }
    }
    Ok(dist)
}

/// Mines one negative per same-writer pair (a, p).
///
/// First choice is the closest semi-hard negative, i.e. the n minimizing
/// d(a,n) subject to `d(a,p) < d(a,n) < d(a,p) + margin`. When that band is
/// empty, falls back to the hardest negative still in the positive-loss
/// region (`d(a,n) < d(a,p) + margin`); pairs whose every negative already
/// satisfies the margin are skipped. Ties resolve to the lowest index.
pub fn mine_semi_hard(
    dist: &Matrix,
    labels: &[usize],
    margin: f64,
) -> Result<Vec<(usize, usize, usize)>, TrainingError> {
    let b = labels.len();
    if dist.rows() != b || dist.cols() != b {
        return Err(TrainingError::ShapeMismatch(format!(
            "{}x{} distances for {b} labels",
            dist.rows(),
            dist.cols()
        )));
    }
    let mut triplets = Vec::new();
    for a in 0..b {
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let d_ap = dist.get(a, p);
            let mut band: Option<(f64, usize)> = None;
            let mut fallback: Option<(f64, usize)> = None;
            for n in 0..b {
                if labels[n] == labels[a] {
                    continue;
                }
                let d_an = dist.get(a, n);
                if d_an > d_ap && d_an < d_ap + margin && band.is_none_or(|(best, _)| d_an < best) {
                    band = Some((d_an, n));
                }
                if d_an < d_ap + margin && fallback.is_none_or(|(best, _)| d_an < best) {
                    fallback = Some((d_an, n));
                }
            }
            if let Some((_, n)) = band.or(fallback) {
                triplets.push((a, p, n));
            }
        }
    }
    if triplets.is_empty() {
        return Err(TrainingError::NoValidTriplets);
    }
    Ok(triplets)
}

/// Hinge triplet loss: `max(d_ap - d_an + margin, 0)`.
pub fn triplet_loss(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// Adamax optimizer state over one flat parameter vector.
///
/// Update rule per step t: `m = b1*m + (1-b1)*g`, `u = max(b2*u, |g|)`,
/// `theta -= lr/(1-b1^t) * m/(u + 1e-8)`.
#[derive(Debug, Clone)]
pub struct AdamaxState {
    m: Vec<f64>,
    u: Vec<f64>,
    t: u32,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
}

const ADAMAX_EPS: f64 = 1e-8;

impl AdamaxState {
    pub fn new(len: usize, learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            m: vec![0.0; len],
            u: vec![0.0; len],
            t: 0,
            learning_rate,
            beta1,
            beta2,
        }
    }

    pub fn step_count(&self) -> u32 {
        self.t
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), TrainingError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainingError::ShapeMismatch(format!(
                "optimizer over {} parameters got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(TrainingError::NonFinite);
        }
        self.t += 1;
        let correction = 1.0 - self.beta1.powi(self.t as i32);
        let scale = self.learning_rate / correction;
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.u[i] = (self.beta2 * self.u[i]).max(grads[i].abs());
            params[i] -= scale * self.m[i] / (self.u[i] + ADAMAX_EPS);
        }
        Ok(())
    }
}

/// Training hyperparameters. Defaults: margin 0.1, lr 1e-3, betas 0.9/0.99,
/// 8 writers × 8 patches per batch, 5 epochs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_writers: usize,
    pub batch_patches: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of each writer's patches held out for validation loss.
    pub val_fraction: f64,
    /// Stop early once the epoch-mean loss improves by less than 1e-4.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            batch_writers: 8,
            batch_patches: 8,
            epochs: 5,
            seed: 0,
            val_fraction: 0.05,
            early_stop: false,
        }
    }
}

const EARLY_STOP_MIN_IMPROVEMENT: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Per-step losses plus per-epoch aggregates.
#[derive(Debug, Clone, Default)]
pub struct LossHistory {
    pub steps: Vec<StepLoss>,
    pub epoch_means: Vec<f64>,
    pub val_losses: Vec<f64>,
}

impl LossHistory {
    /// CSV rows `epoch,step,loss` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{:.9e}\n", s.epoch, s.step, s.loss));
        }
        out
    }
}

struct WriterPool {
    /// Row indices into the stacked descriptor matrix.
    train: Vec<usize>,
    val: Vec<usize>,
}

/// Learns embedding-layer parameters with semi-hard triplet loss.
///
/// Each step samples a balanced batch (up to `batch_writers` writers times
/// `batch_patches` descriptors), embeds it, mines triplets on the squared
/// Euclidean distances of the normalized embeddings, and applies one Adamax
/// update. Fully deterministic for a fixed seed; train and validation splits
/// are disjoint by patch.
pub fn train(
    sets: &[DescriptorSet],
    params: &NetVladParams,
    cfg: &TrainConfig,
) -> Result<(NetVladParams, LossHistory), TrainingError> {
    assert!(cfg.batch_writers >= 2 && cfg.batch_patches >= 2, "batch must be at least 2x2");

    // Stack all descriptors and group rows per writer.
    let dim = params.dim();
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut by_writer: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for set in sets {
        if set.dim() != dim {
            return Err(TrainingError::ShapeMismatch(format!(
                "descriptor set {} has D={}, layer expects D={dim}",
                set.doc_id,
                set.dim()
            )));
        }
        for r in 0..set.len() {
            by_writer.entry(&set.writer_id).or_default().push(rows.len());
            rows.push(set.descriptors.row(r));
        }
    }

    let mut rng = SeededRng::new(cfg.seed);
    let mut pools: Vec<WriterPool> = Vec::new();
    for indices in by_writer.values() {
        let mut shuffled = indices.clone();
        rng.shuffle(&mut shuffled);
        let val_count = (shuffled.len() as f64 * cfg.val_fraction).floor() as usize;
        // Keep at least two training patches per writer where possible.
        let val_count = val_count.min(shuffled.len().saturating_sub(2));
        let val = shuffled.split_off(shuffled.len() - val_count);
        pools.push(WriterPool { train: shuffled, val });
    }
    let trainable: Vec<usize> = (0..pools.len()).filter(|&w| pools[w].train.len() >= 2).collect();
    if trainable.len() < 2 {
        return Err(TrainingError::InsufficientWriters(trainable.len()));
    }

    let total_train: usize = trainable.iter().map(|&w| pools[w].train.len()).sum();
    let batch_size = cfg.batch_writers * cfg.batch_patches;
    let steps_per_epoch = (total_train / batch_size).max(1);

    let mut flat = params.to_flat();
    let mut optimizer = AdamaxState::new(flat.len(), cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut history = LossHistory::default();
    let k = params.clusters();

    for epoch in 0..cfg.epochs {
        let mut epoch_sum = 0.0;
        for step in 0..steps_per_epoch {
            let current = NetVladParams::from_flat(k, dim, &flat)?;
            let (batch_rows, labels) =
                sample_batch(&pools, &trainable, cfg.batch_writers, cfg.batch_patches, &mut rng);
            let (loss, grad) =
                batch_loss_and_grad(&current, &rows, &batch_rows, &labels, cfg.margin, true)?;
            if let Some(grad) = grad {
                optimizer.step(&mut flat, &grad)?;
            }
            epoch_sum += loss;
            history.steps.push(StepLoss { epoch, step, loss });
        }
        let epoch_mean = epoch_sum / steps_per_epoch as f64;
        history.epoch_means.push(epoch_mean);

        // Validation loss over held-out patches, one pass per epoch.
        let val_total: usize = trainable.iter().map(|&w| pools[w].val.len()).sum();
        if val_total >= 2 * cfg.batch_patches {
            let current = NetVladParams::from_flat(k, dim, &flat)?;
            let mut val_rng = SeededRng::new(cfg.seed ^ 0x5eed_0000 ^ epoch as u64);
            let val_steps = (val_total / batch_size).max(1);
            let mut val_sum = 0.0;
            for _ in 0..val_steps {
                let (batch_rows, labels) = sample_val_batch(
                    &pools,
                    &trainable,
                    cfg.batch_writers,
                    cfg.batch_patches,
                    &mut val_rng,
                );
                if let Ok((loss, _)) =
                    batch_loss_and_grad(&current, &rows, &batch_rows, &labels, cfg.margin, false)
                {
                    val_sum += loss;
                }
            }
            history.val_losses.push(val_sum / val_steps as f64);
        }

        if cfg.early_stop && epoch > 0 {
            let prev = history.epoch_means[epoch - 1];
            if prev - epoch_mean < EARLY_STOP_MIN_IMPROVEMENT {
                break;
            }
        }
    }

    Ok((NetVladParams::from_flat(k, dim, &flat)?, history))
}

fn sample_batch(
    pools: &[WriterPool],
    trainable: &[usize],
    batch_writers: usize,
    batch_patches: usize,
    rng: &mut SeededRng,
) -> (Vec<usize>, Vec<usize>) {
    let picked = rng.sample_indices(trainable.len(), batch_writers.min(trainable.len()));
    let mut batch_rows = Vec::new();
    let mut labels = Vec::new();
    for &w_idx in &picked {
        let writer = trainable[w_idx];
        let pool = &pools[writer].train;
        let chosen: Vec<usize> = if pool.len() >= batch_patches {
            rng.sample_indices(pool.len(), batch_patches)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        } else {
            (0..batch_patches).map(|_| pool[rng.gen_range(pool.len())]).collect()
        };
        for row in chosen {
            batch_rows.push(row);
            labels.push(writer);
        }
    }
    (batch_rows, labels)
}

fn sample_val_batch(
    pools: &[WriterPool],
    trainable: &[usize],
    batch_writers: usize,
    batch_patches: usize,
    rng: &mut SeededRng,
) -> (Vec<usize>, Vec<usize>) {
    let with_val: Vec<usize> = trainable
        .iter()
        .copied()
        .filter(|&w| !pools[w].val.is_empty())
        .collect();
    let picked = rng.sample_indices(with_val.len(), batch_writers.min(with_val.len()));
    let mut batch_rows = Vec::new();
    let mut labels = Vec::new();
    for &w_idx in &picked {
        let writer = with_val[w_idx];
        let pool = &pools[writer].val;
        for _ in 0..batch_patches.min(pool.len()) {
            batch_rows.push(pool[rng.gen_range(pool.len())]);
            labels.push(writer);
        }
    }
    (batch_rows, labels)
}

/// Embeds a batch, mines triplets, and returns the mean loss plus (optionally)
/// the gradient over the flat parameter vector. `None` gradient means the
/// step had no active triplet. Mining is frozen: no gradient flows through
/// the triplet selection.
fn batch_loss_and_grad(
    params: &NetVladParams,
    rows: &[&[f64]],
    batch_rows: &[usize],
    labels: &[usize],
    margin: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>), TrainingError> {
    let b = batch_rows.len();
    let e = params.embedding_len();
    let mut emb_data = Vec::with_capacity(b * e);
    for &row in batch_rows {
        emb_data.extend_from_slice(embed(params, rows[row])?.as_slice());
    }
    let embeddings =
        Matrix::new(b, e, emb_data).map_err(|_| TrainingError::NonFinite)?;
    let dist = pairwise_sq_dist(&embeddings)?;

    let triplets = match mine_semi_hard(&dist, labels, margin) {
        Ok(t) => t,
        Err(TrainingError::NoValidTriplets) => return Ok((0.0, None)),
        Err(e) => return Err(e),
    };

    let count = triplets.len() as f64;
    let mut loss_sum = 0.0;
    let mut upstream = vec![0.0f64; b * e];
    let mut any_active = false;
    for &(a, p, n) in &triplets {
        let d_ap = dist.get(a, p);
        let d_an = dist.get(a, n);
        let loss = triplet_loss(d_ap, d_an, margin);
        loss_sum += loss;
        if loss > 0.0 && want_grad {
            any_active = true;
            let scale = 2.0 / count;
            for j in 0..e {
                let ea = embeddings.get(a, j);
                let ep = embeddings.get(p, j);
                let en = embeddings.get(n, j);
                upstream[a * e + j] += scale * (en - ep);
                upstream[p * e + j] += scale * (ep - ea);
                upstream[n * e + j] += scale * (ea - en);
            }
        }
    }
    let mean_loss = loss_sum / count;

    if !want_grad || !any_active {
        return Ok((mean_loss, None));
    }

    let k = params.clusters();
    let d = params.dim();
    let mut grad = vec![0.0f64; 2 * k * d + k];
    for (i, &row) in batch_rows.iter().enumerate() {
        let up = &upstream[i * e..(i + 1) * e];
        if up.iter().all(|&v| v == 0.0) {
            continue;
        }
        let g = embed_backward(params, rows[row], up)?;
        for (dst, src) in grad[..k * d].iter_mut().zip(g.centers.data()) {
            *dst += src;
        }
        for (dst, src) in grad[k * d..2 * k * d].iter_mut().zip(g.weights.data()) {
            *dst += src;
        }
        for (dst, src) in grad[2 * k * d..].iter_mut().zip(&g.biases) {
            *dst += src;
        }
    }
    Ok((mean_loss, Some(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netvlad::{coupled_params, init_params, InitMode};
    use crate::synth::{generate, SynthConfig};

    fn embeddings_from_rows(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    /// Straight re-statement of the mining rule, enumerated exhaustively.
    fn mine_brute_force(
        dist: &Matrix,
        labels: &[usize],
        margin: f64,
    ) -> Vec<(usize, usize, usize)> {
        let b = labels.len();
        let mut out = Vec::new();
        for a in 0..b {
            for p in 0..b {
                if a == p || labels[a] != labels[p] {
                    continue;
                }
                let d_ap = dist.get(a, p);
                let negatives: Vec<usize> =
                    (0..b).filter(|&n| labels[n] != labels[a]).collect();
                let in_band: Vec<usize> = negatives
                    .iter()
                    .copied()
                    .filter(|&n| dist.get(a, n) > d_ap && dist.get(a, n) < d_ap + margin)
                    .collect();
                let candidates = if in_band.is_empty() {
                    negatives
                        .iter()
                        .copied()
                        .filter(|&n| dist.get(a, n) < d_ap + margin)
                        .collect()
                } else {
                    in_band
                };
                let best = candidates.into_iter().min_by(|&x, &y| {
                    dist.get(a, x)
                        .partial_cmp(&dist.get(a, y))
                        .unwrap()
                        .then(x.cmp(&y))
                });
                if let Some(n) = best {
                    out.push((a, p, n));
                }
            }
        }
        out
    }

    #[test]
    fn pairwise_identical_rows_are_zero() {
        let m = embeddings_from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let d = pairwise_sq_dist(&m).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pairwise_standard_basis() {
        let m = embeddings_from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let d = pairwise_sq_dist(&m).unwrap();
        assert!((d.get(0, 1) - 2.0).abs() < 1e-15);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn pairwise_matches_naive_loop() {
        let mut rng = SeededRng::new(2);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let m = embeddings_from_rows(&rows);
        let d = pairwise_sq_dist(&m).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let naive: f64 = rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!((d.get(i, j) - naive).abs() < 1e-10);
                assert_eq!(d.get(i, j), d.get(j, i));
            }
        }
    }

    #[test]
    fn mining_skips_pairs_beyond_margin() {
        // Both negatives are farther than d_ap + margin: nothing to mine.
        let rows = vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![10.0, 0.0],
            vec![11.0, 0.0],
        ];
        let m = embeddings_from_rows(&rows);
        let d = pairwise_sq_dist(&m).unwrap();
        let labels = vec![0, 0, 1, 1];
        // Pairs within writer 1 see negatives at distance ~100 >> band, and
        // writer-1 anchors see writer-0 negatives equally far: no triplets.
        assert!(matches!(
            mine_semi_hard(&d, &labels, 0.1),
            Err(TrainingError::NoValidTriplets)
        ));
    }

    #[test]
    fn mining_picks_semi_hard_band() {
        // d(a,p) = 0.2, d(a,n) = 0.25, margin 0.1: the band applies.
        let mut dist = Matrix::zeros(3, 3);
        dist.set(0, 1, 0.2);
        dist.set(1, 0, 0.2);
        dist.set(0, 2, 0.25);
        dist.set(2, 0, 0.25);
        dist.set(1, 2, 0.5);
        dist.set(2, 1, 0.5);
        let triplets = mine_semi_hard(&dist, &[0, 0, 1], 0.1).unwrap();
        assert!(triplets.contains(&(0, 1, 2)));
    }

    #[test]
    fn mining_matches_brute_force() {
        for seed in 0..30u64 {
            let mut rng = SeededRng::new(seed);
            let b = 8;
            let rows: Vec<Vec<f64>> =
                (0..b).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(3)).collect();
            let m = embeddings_from_rows(&rows);
            let d = pairwise_sq_dist(&m).unwrap();
            let margin = 0.5;
            let got = mine_semi_hard(&d, &labels, margin);
            let want = mine_brute_force(&d, &labels, margin);
            match got {
                Ok(t) => assert_eq!(t, want, "seed {seed}"),
                Err(TrainingError::NoValidTriplets) => assert!(want.is_empty(), "seed {seed}"),
                Err(e) => panic!("seed {seed}: {e}"),
            }
        }
    }

    #[test]
    fn mined_triplets_have_valid_labels() {
        let mut rng = SeededRng::new(5);
        let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let d = pairwise_sq_dist(&embeddings_from_rows(&rows)).unwrap();
        if let Ok(triplets) = mine_semi_hard(&d, &labels, 1.0) {
            for (a, p, n) in triplets {
                assert_ne!(a, p);
                assert_eq!(labels[a], labels[p]);
                assert_ne!(labels[a], labels[n]);
            }
        }
    }

    #[test]
    fn margin_zero_selects_only_strict_violations() {
        let mut rng = SeededRng::new(6);
        let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let d = pairwise_sq_dist(&embeddings_from_rows(&rows)).unwrap();
        if let Ok(triplets) = mine_semi_hard(&d, &labels, 0.0) {
            for (a, p, n) in triplets {
                assert!(d.get(a, n) < d.get(a, p), "selected non-violating negative");
            }
        }
    }

    #[test]
    fn triplet_loss_hand_values() {
        assert!((triplet_loss(0.2, 0.25, 0.1) - 0.05).abs() < 1e-15);
        assert_eq!(triplet_loss(0.2, 0.35, 0.1), 0.0);
        assert!((triplet_loss(0.3, 0.3, 0.1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn adamax_zero_gradient_is_identity() {
        let mut theta = vec![0.4, -0.3];
        let mut state = AdamaxState::new(2, 0.1, 0.9, 0.99);
        state.step(&mut theta, &[0.0, 0.0]).unwrap();
        assert_eq!(theta, vec![0.4, -0.3]);
    }

    #[test]
    fn adamax_single_step_hand_computation() {
        // theta=0, g=1, lr=0.1, t=1:
        // m = 0.1, u = 1, theta -= (0.1/0.1) * 0.1/(1+1e-8).
        let mut theta = vec![0.0];
        let mut state = AdamaxState::new(1, 0.1, 0.9, 0.99);
        state.step(&mut theta, &[1.0]).unwrap();
        let expected = -(0.1 / (1.0 - 0.9f64)) * (0.1 * 1.0) / (1.0 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-15, "{} vs {expected}", theta[0]);
        assert!((theta[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn adamax_rejects_non_finite_gradients() {
        let mut theta = vec![0.0];
        let mut state = AdamaxState::new(1, 0.1, 0.9, 0.99);
        assert!(matches!(
            state.step(&mut theta, &[f64::NAN]),
            Err(TrainingError::NonFinite)
        ));
    }

    fn synth_sets(writers: usize, separation: f64, seed: u64) -> Vec<DescriptorSet> {
        generate(&SynthConfig {
            writers,
            docs_per_writer: 2,
            descriptors_per_doc: 24,
            dim: 8,
            separation,
            noise: 1.0,
            seed,
        })
    }

    #[test]
    fn training_reduces_loss_on_separated_writers() {
        let sets = synth_sets(2, 12.0, 7);
        let sample_rows: Vec<Vec<f64>> = sets
            .iter()
            .flat_map(|s| (0..s.len()).map(|r| s.descriptors.row(r).to_vec()))
            .collect();
        let sample = Matrix::from_rows(&sample_rows).unwrap();
        let mut rng = SeededRng::new(1);
        let params = init_params(&sample, 4, 10.0, InitMode::KMeans, &mut rng).unwrap();
        let cfg = TrainConfig {
            batch_writers: 2,
            batch_patches: 8,
            epochs: 5,
            seed: 3,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let (_, history) = train(&sets, &params, &cfg).unwrap();
        let first = history.epoch_means.first().unwrap();
        let last = history.epoch_means.last().unwrap();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let sets = synth_sets(3, 4.0, 9);
        let sample_rows: Vec<Vec<f64>> = sets
            .iter()
            .flat_map(|s| (0..s.len()).map(|r| s.descriptors.row(r).to_vec()))
            .collect();
        let sample = Matrix::from_rows(&sample_rows).unwrap();
        let params =
            init_params(&sample, 4, 10.0, InitMode::KMeans, &mut SeededRng::new(2)).unwrap();
        let cfg = TrainConfig {
            batch_writers: 3,
            batch_patches: 4,
            epochs: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let (p1, h1) = train(&sets, &params, &cfg).unwrap();
        let (p2, h2) = train(&sets, &params, &cfg).unwrap();
        assert_eq!(p1.to_flat(), p2.to_flat());
        assert_eq!(h1.steps, h2.steps);
    }

    #[test]
    fn training_separates_writer_clusters() {
        let sets = synth_sets(20, 8.0, 42);
        let sample_rows: Vec<Vec<f64>> = sets
            .iter()
            .flat_map(|s| (0..s.len()).map(|r| s.descriptors.row(r).to_vec()))
            .collect();
        let sample = Matrix::from_rows(&sample_rows).unwrap();
        let params =
            init_params(&sample, 8, 10.0, InitMode::KMeans, &mut SeededRng::new(4)).unwrap();
        let cfg = TrainConfig {
            batch_writers: 6,
            batch_patches: 6,
            epochs: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&sets, &params, &cfg).unwrap();

        // Mean intra-writer vs inter-writer squared distance on embeddings.
        let mut embeddings: Vec<(usize, Vec<f64>)> = Vec::new();
        for (w, set) in sets.iter().enumerate() {
            for r in 0..set.len() {
                embeddings
                    .push((w / 2, embed(&trained, set.descriptors.row(r)).unwrap().data));
            }
        }
        let mut intra = (0.0f64, 0usize);
        let mut inter = (0.0f64, 0usize);
        for i in 0..embeddings.len() {
            for j in (i + 1)..embeddings.len() {
                let d: f64 = embeddings[i]
                    .1
                    .iter()
                    .zip(&embeddings[j].1)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if sets[embeddings[i].0 * 2].writer_id == sets[embeddings[j].0 * 2].writer_id {
                    intra = (intra.0 + d, intra.1 + 1);
                } else {
                    inter = (inter.0 + d, inter.1 + 1);
                }
            }
        }
        let mean_intra = intra.0 / intra.1 as f64;
        let mean_inter = inter.0 / inter.1 as f64;
        assert!(
            mean_intra < mean_inter,
            "intra {mean_intra} vs inter {mean_inter}"
        );
    }

    #[test]
    fn single_optimizer_step_decreases_fixed_triplet_loss() {
        for seed in 0..5u64 {
            let mut rng = SeededRng::new(seed);
            let d = 4;
            let k = 3;
            let rows: Vec<Vec<f64>> =
                (0..k).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
            let centers = Matrix::from_rows(&rows).unwrap();
            let params = coupled_params(&centers, 2.0).unwrap();

            let batch: Vec<Vec<f64>> =
                (0..8).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
            let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
            let row_refs: Vec<&[f64]> = batch.iter().map(|r| r.as_slice()).collect();
            let batch_rows: Vec<usize> = (0..8).collect();

            // Mine once against the starting parameters.
            let emb: Vec<Vec<f64>> = batch
                .iter()
                .map(|x| embed(&params, x).unwrap().data)
                .collect();
            let dist = pairwise_sq_dist(&Matrix::from_rows(&emb).unwrap()).unwrap();
            let margin = 0.2;
            let Ok(triplets) = mine_semi_hard(&dist, &labels, margin) else {
                continue;
            };
            let loss_for = |p: &NetVladParams| -> f64 {
                let emb: Vec<Vec<f64>> =
                    batch.iter().map(|x| embed(p, x).unwrap().data).collect();
                let dist = pairwise_sq_dist(&Matrix::from_rows(&emb).unwrap()).unwrap();
                triplets
                    .iter()
                    .map(|&(a, p2, n)| triplet_loss(dist.get(a, p2), dist.get(a, n), margin))
                    .sum::<f64>()
                    / triplets.len() as f64
            };
            let before = loss_for(&params);
            if before == 0.0 {
                continue;
            }

            let (_, grad) =
                batch_loss_and_grad(&params, &row_refs, &batch_rows, &labels, margin, true)
                    .unwrap();
            let Some(grad) = grad else { continue };
            let mut flat = params.to_flat();
            let mut opt = AdamaxState::new(flat.len(), 1e-4, 0.9, 0.99);
            opt.step(&mut flat, &grad).unwrap();
            let stepped = NetVladParams::from_flat(k, d, &flat).unwrap();
            let after = loss_for(&stepped);
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }
}
