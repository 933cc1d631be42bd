//! Trainable VLAD embedding layer with decoupled parameters.
//!
//! A descriptor x is soft-assigned to K learned clusters through a softmax
//! over `w_k . x + b_k`, and its embedding stacks the weighted residuals
//! `a_k(x) * (x - c_k)` cluster by cluster, followed by a global l2
//! normalization. Hard VLAD (argmin assignment, no normalization) is kept as
//! the reference oracle the soft layer degenerates to for sharp assignments.

use crate::numerics::{dot, norm2, Matrix, SeededRng};
use thiserror::Error;

/// Default number of clusters.
pub const DEFAULT_CLUSTERS: usize = 100;
/// Default assignment sharpness for k-means-coupled initialization.
pub const DEFAULT_ALPHA_INIT: f64 = 25.0;
/// Norms below this are treated as zero by the l2 normalization guard.
pub const ZERO_GUARD: f64 = 1e-12;
/// Lloyd iterations run by k-means initialization.
pub const KMEANS_ITERS: usize = 20;

#[derive(Debug, Error)]
pub enum NetVladError {
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("k-means needs at least {need} samples, got {have}")]
    TooFewSamples { have: usize, need: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad magic: expected NVLD1")]
    BadMagic,
    #[error("truncated input: {0}")]
    Truncated(&'static str),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Decoupled layer parameters: cluster centers, assignment weights, biases.
#[derive(Debug, Clone)]
pub struct NetVladParams {
    centers: Matrix, // K×D
    weights: Matrix, // K×D
    biases: Vec<f64>,
}

impl NetVladParams {
    pub fn new(centers: Matrix, weights: Matrix, biases: Vec<f64>) -> Result<Self, NetVladError> {
        let k = centers.rows();
        let d = centers.cols();
        if k < 2 {
            return Err(NetVladError::ShapeMismatch(format!("K must be >= 2, got {k}")));
        }
        if weights.rows() != k || weights.cols() != d || biases.len() != k {
            return Err(NetVladError::ShapeMismatch(format!(
                "centers {k}x{d}, weights {}x{}, biases {}",
                weights.rows(),
                weights.cols(),
                biases.len()
            )));
        }
        if !centers.is_finite() || !weights.is_finite() || !biases.iter().all(|v| v.is_finite()) {
            return Err(NetVladError::NonFinite);
        }
        Ok(Self { centers, weights, biases })
    }

    pub fn clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    /// Length of the embedding this layer produces (K·D).
    pub fn embedding_len(&self) -> usize {
        self.clusters() * self.dim()
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    /// Flattens parameters as [centers, weights, biases] for the optimizer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(2 * self.embedding_len() + self.clusters());
        flat.extend_from_slice(self.centers.data());
        flat.extend_from_slice(self.weights.data());
        flat.extend_from_slice(&self.biases);
        flat
    }

    /// Rebuilds parameters from the flat layout of [`Self::to_flat`].
    pub fn from_flat(k: usize, d: usize, flat: &[f64]) -> Result<Self, NetVladError> {
        if flat.len() != 2 * k * d + k {
            return Err(NetVladError::ShapeMismatch(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                2 * k * d + k
            )));
        }
        let centers = Matrix::new(k, d, flat[..k * d].to_vec()).map_err(|_| NetVladError::NonFinite)?;
        let weights =
            Matrix::new(k, d, flat[k * d..2 * k * d].to_vec()).map_err(|_| NetVladError::NonFinite)?;
        Self::new(centers, weights, flat[2 * k * d..].to_vec())
    }
}

/// One descriptor's embedding: K·D values, cluster-major (block k holds the
/// D weighted residuals against center k).
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub data: Vec<f64>,
}

impl Embedding {
    pub fn block(&self, k: usize, d: usize) -> &[f64] {
        &self.data[k * d..(k + 1) * d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Global l2 normalization with a zero guard: vectors with norm below
/// [`ZERO_GUARD`] are returned unchanged.
pub fn normalize_l2(v: &mut [f64]) {
    let n = norm2(v);
    if n >= ZERO_GUARD {
        for x in v {
            *x /= n;
        }
    }
}

fn check_input(params: &NetVladParams, x: &[f64]) -> Result<(), NetVladError> {
    if x.len() != params.dim() {
        return Err(NetVladError::ShapeMismatch(format!(
            "descriptor has {} dims, layer expects {}",
            x.len(),
            params.dim()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(NetVladError::NonFinite);
    }
    Ok(())
}

/// Softmax assignment of a descriptor to the K clusters.
///
/// Logits are `w_k . x + b_k`, stabilized by max-logit subtraction; the
/// result is a probability vector.
pub fn soft_assign(params: &NetVladParams, x: &[f64]) -> Result<Vec<f64>, NetVladError> {
    check_input(params, x)?;
    let k = params.clusters();
    let mut logits = Vec::with_capacity(k);
    for c in 0..k {
        logits.push(dot(params.weights.row(c), x) + params.biases[c]);
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(NetVladError::NonFinite);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Derives coupled parameters from centers: `w_k = 2*alpha*c_k` and
/// `b_k = -alpha*||c_k||^2`, so the softmax assignment equals the Gaussian
/// distance-based assignment exactly.
pub fn coupled_params(centers: &Matrix, alpha: f64) -> Result<NetVladParams, NetVladError> {
    assert!(alpha > 0.0, "alpha must be positive");
    let k = centers.rows();
    let d = centers.cols();
    let mut weights = Matrix::zeros(k, d);
    let mut biases = Vec::with_capacity(k);
    for c in 0..k {
        let row = centers.row(c);
        for j in 0..d {
            weights.set(c, j, 2.0 * alpha * row[j]);
        }
        biases.push(-alpha * dot(row, row));
    }
    NetVladParams::new(centers.clone(), weights, biases)
}

/// Raw (pre-normalization) soft embedding: block k is `a_k(x) * (x - c_k)`.
pub fn embed_raw(params: &NetVladParams, x: &[f64]) -> Result<Vec<f64>, NetVladError> {
    let assign = soft_assign(params, x)?;
    let d = params.dim();
    let mut out = vec![0.0f64; params.embedding_len()];
    for (k, &a) in assign.iter().enumerate() {
        let center = params.centers.row(k);
        for j in 0..d {
            out[k * d + j] = a * (x[j] - center[j]);
        }
    }
    Ok(out)
}

/// Soft VLAD embedding of one descriptor, globally l2-normalized
/// (zero-guarded).
pub fn embed(params: &NetVladParams, x: &[f64]) -> Result<Embedding, NetVladError> {
    let mut data = embed_raw(params, x)?;
    normalize_l2(&mut data);
    Ok(Embedding { data })
}

/// Hard VLAD oracle: the full residual goes to the nearest center (ties to
/// the lowest index); no normalization.
pub fn vlad_hard(centers: &Matrix, x: &[f64]) -> Embedding {
    assert_eq!(x.len(), centers.cols(), "descriptor dimension mismatch");
    let k = centers.rows();
    let d = centers.cols();
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for c in 0..k {
        let row = centers.row(c);
        let dist: f64 = x
            .iter()
            .zip(row)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if dist < best_dist {
            best_dist = dist;
            best = c;
        }
    }
    let mut data = vec![0.0f64; k * d];
    let row = centers.row(best);
    for j in 0..d {
        data[best * d + j] = x[j] - row[j];
    }
    Embedding { data }
}

/// Gradients of the normalized embedding with respect to every input.
#[derive(Debug, Clone)]
pub struct EmbedGradients {
    pub x: Vec<f64>,
    pub centers: Matrix,
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

/// Backpropagates an upstream gradient through the normalized embedding.
///
/// Covers the l2-normalization Jacobian (the zero-guard branch is treated as
/// the identity map) and the softmax Jacobian of the assignments.
pub fn embed_backward(
    params: &NetVladParams,
    x: &[f64],
    upstream: &[f64],
) -> Result<EmbedGradients, NetVladError> {
    check_input(params, x)?;
    if upstream.len() != params.embedding_len() {
        return Err(NetVladError::ShapeMismatch(format!(
            "upstream gradient has {} entries, expected {}",
            upstream.len(),
            params.embedding_len()
        )));
    }
    if !upstream.iter().all(|v| v.is_finite()) {
        return Err(NetVladError::NonFinite);
    }
    let k = params.clusters();
    let d = params.dim();
    let assign = soft_assign(params, x)?;
    let raw = {
        let mut out = vec![0.0f64; k * d];
        for (c, &a) in assign.iter().enumerate() {
            let center = params.centers.row(c);
            for j in 0..d {
                out[c * d + j] = a * (x[j] - center[j]);
            }
        }
        out
    };

    // Jacobian of y = v / ||v|| (identity when the zero guard fires).
    let n = norm2(&raw);
    let grad_raw: Vec<f64> = if n < ZERO_GUARD {
        upstream.to_vec()
    } else {
        let y: Vec<f64> = raw.iter().map(|v| v / n).collect();
        let y_dot_g = dot(&y, upstream);
        upstream
            .iter()
            .zip(&y)
            .map(|(g, yi)| (g - yi * y_dot_g) / n)
            .collect()
    };

    let mut grad_assign = vec![0.0f64; k];
    let mut grad_centers = Matrix::zeros(k, d);
    let mut grad_x = vec![0.0f64; d];
    for c in 0..k {
        let center = params.centers.row(c);
        let gv = &grad_raw[c * d..(c + 1) * d];
        let a = assign[c];
        let mut da = 0.0;
        for j in 0..d {
            da += gv[j] * (x[j] - center[j]);
            grad_centers.set(c, j, -a * gv[j]);
            grad_x[j] += a * gv[j];
        }
        grad_assign[c] = da;
    }

    // Softmax backward: dz_k = a_k (da_k - sum_j a_j da_j).
    let mix: f64 = assign.iter().zip(&grad_assign).map(|(a, g)| a * g).sum();
    let grad_logits: Vec<f64> = assign
        .iter()
        .zip(&grad_assign)
        .map(|(a, g)| a * (g - mix))
        .collect();

    let mut grad_weights = Matrix::zeros(k, d);
    for c in 0..k {
        for j in 0..d {
            grad_weights.set(c, j, grad_logits[c] * x[j]);
        }
        for j in 0..d {
            grad_x[j] += grad_logits[c] * params.weights.get(c, j);
        }
    }

    Ok(EmbedGradients {
        x: grad_x,
        centers: grad_centers,
        weights: grad_weights,
        biases: grad_logits,
    })
}

/// Parameter initialization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Seeded k-means++ plus Lloyd iterations, coupled with `alpha_init`.
    KMeans,
    /// Xavier-style uniform for centers and weights, zero biases.
    Random,
}

/// Seeded k-means: k-means++ seeding followed by [`KMEANS_ITERS`] Lloyd
/// iterations. Returns the centers and the per-iteration objective (sum of
/// squared distances), which is non-increasing.
pub fn kmeans(sample: &Matrix, k: usize, rng: &mut SeededRng) -> (Matrix, Vec<f64>) {
    let m = sample.rows();
    let d = sample.cols();
    assert!(m >= k && k >= 1, "need at least k samples");

    let sq_dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding.
    let mut center_rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(m);
    center_rows.push(sample.row(first).to_vec());
    let mut min_dist: Vec<f64> = (0..m)
        .map(|i| sq_dist(sample.row(i), &center_rows[0]))
        .collect();
    while center_rows.len() < k {
        let total: f64 = min_dist.iter().sum();
        let chosen = if total <= 0.0 {
            // All remaining mass is on already-chosen points; take the first
            // index at nonzero distance, or failing that the lowest index.
            min_dist.iter().position(|&v| v > 0.0).unwrap_or(0)
        } else {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = m - 1;
            for (i, &v) in min_dist.iter().enumerate() {
                acc += v;
                if target < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let new_center = sample.row(chosen).to_vec();
        for i in 0..m {
            let dist = sq_dist(sample.row(i), &new_center);
            if dist < min_dist[i] {
                min_dist[i] = dist;
            }
        }
        center_rows.push(new_center);
    }

    // Lloyd iterations; empty clusters keep their previous center.
    let mut history = Vec::with_capacity(KMEANS_ITERS);
    let mut assignment = vec![0usize; m];
    for _ in 0..KMEANS_ITERS {
        let mut objective = 0.0f64;
        for i in 0..m {
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for (c, center) in center_rows.iter().enumerate() {
                let dist = sq_dist(sample.row(i), center);
                if dist < best_dist {
                    best_dist = dist;
                    best = c;
                }
            }
            assignment[i] = best;
            objective += best_dist;
        }
        history.push(objective);

        let mut sums = vec![vec![0.0f64; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..m {
            let c = assignment[i];
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(sample.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in center_rows[c].iter_mut().zip(&sums[c]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }

    let centers = Matrix::from_rows(&center_rows).expect("centers are finite");
    (centers, history)
}

/// Initializes layer parameters from a descriptor sample.
pub fn init_params(
    sample: &Matrix,
    k: usize,
    alpha_init: f64,
    mode: InitMode,
    rng: &mut SeededRng,
) -> Result<NetVladParams, NetVladError> {
    let d = sample.cols();
    match mode {
        InitMode::KMeans => {
            if sample.rows() < k {
                return Err(NetVladError::TooFewSamples { have: sample.rows(), need: k });
            }
            let (centers, _) = kmeans(sample, k, rng);
            coupled_params(&centers, alpha_init)
        }
        InitMode::Random => {
            // Uniform with variance 2/(fan_in + fan_out).
            let limit = (6.0 / (d + k) as f64).sqrt();
            let mut draw = |m: &mut Matrix| {
                for r in 0..k {
                    for c in 0..d {
                        m.set(r, c, (2.0 * rng.next_f64() - 1.0) * limit);
                    }
                }
            };
            let mut centers = Matrix::zeros(k, d);
            let mut weights = Matrix::zeros(k, d);
            draw(&mut centers);
            draw(&mut weights);
            NetVladParams::new(centers, weights, vec![0.0; k])
        }
    }
}

/// Serializes parameters in `NVLD1` format: magic `NVLD1\n`, header `K D\n`,
/// then centers and weights (K·D little-endian f32 each) and biases (K f32).
pub fn encode_params(params: &NetVladParams) -> Vec<u8> {
    let mut out = format!("NVLD1\n{} {}\n", params.clusters(), params.dim()).into_bytes();
    for v in params.centers.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for v in params.weights.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for v in &params.biases {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Parses an `NVLD1` byte stream.
pub fn parse_params(bytes: &[u8]) -> Result<NetVladParams, NetVladError> {
    let magic = b"NVLD1\n";
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(NetVladError::BadMagic);
    }
    let rest = &bytes[magic.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(NetVladError::Truncated("header line"))?;
    let header = std::str::from_utf8(&rest[..nl])
        .map_err(|_| NetVladError::Malformed("header not utf-8".into()))?;
    let fields: Vec<&str> = header.split_ascii_whitespace().collect();
    if fields.len() != 2 {
        return Err(NetVladError::Malformed("header needs K and D".into()));
    }
    let k: usize = fields[0]
        .parse()
        .map_err(|_| NetVladError::Malformed("K not a number".into()))?;
    let d: usize = fields[1]
        .parse()
        .map_err(|_| NetVladError::Malformed("D not a number".into()))?;
    let payload = &rest[nl + 1..];
    let need = (2 * k * d + k) * 4;
    if payload.len() < need {
        return Err(NetVladError::Truncated("parameter payload"));
    }
    let read_f32 = |i: usize| -> f64 {
        f64::from(f32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().unwrap()))
    };
    let centers_data: Vec<f64> = (0..k * d).map(read_f32).collect();
    let weights_data: Vec<f64> = (k * d..2 * k * d).map(read_f32).collect();
    let biases: Vec<f64> = (2 * k * d..2 * k * d + k).map(read_f32).collect();
    let centers = Matrix::new(k, d, centers_data).map_err(|_| NetVladError::NonFinite)?;
    let weights = Matrix::new(k, d, weights_data).map_err(|_| NetVladError::NonFinite)?;
    NetVladParams::new(centers, weights, biases)
}

pub fn write_params(path: &std::path::Path, params: &NetVladParams) -> Result<(), NetVladError> {
    std::fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn read_params(path: &std::path::Path) -> Result<NetVladParams, NetVladError> {
    parse_params(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_params(k: usize, d: usize) -> NetVladParams {
        NetVladParams::new(Matrix::zeros(k, d), Matrix::zeros(k, d), vec![0.0; k]).unwrap()
    }

    /// Distance-based assignment computed straight from its definition;
    /// independent oracle for the coupled parameterization.
    fn gaussian_assign(centers: &Matrix, alpha: f64, x: &[f64]) -> Vec<f64> {
        let dists: Vec<f64> = (0..centers.rows())
            .map(|c| {
                x.iter()
                    .zip(centers.row(c))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> = dists.iter().map(|d| (-alpha * (d - min)).exp()).collect();
        let sum: f64 = weights.iter().sum();
        weights.into_iter().map(|w| w / sum).collect()
    }

    #[test]
    fn uniform_assignment_for_zero_params() {
        let params = uniform_params(4, 3);
        let a = soft_assign(&params, &[0.3, -0.2, 0.9]).unwrap();
        for v in &a {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_softmax() {
        // Logits (0, ln 3) give assignments (1/4, 3/4).
        let params = NetVladParams::new(
            Matrix::zeros(2, 1),
            Matrix::zeros(2, 1),
            vec![0.0, 3.0f64.ln()],
        )
        .unwrap();
        let a = soft_assign(&params, &[0.0]).unwrap();
        assert!((a[0] - 0.25).abs() < 1e-15);
        assert!((a[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = SeededRng::new(4);
        let centers = Matrix::from_rows(
            &(0..5)
                .map(|_| (0..3).map(|_| rng.normal()).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let params = coupled_params(&centers, 2.0).unwrap();
        let shifted = NetVladParams::new(
            params.centers().clone(),
            params.weights().clone(),
            params.biases().iter().map(|b| b + 1000.0).collect(),
        )
        .unwrap();
        let x = [0.1, -0.7, 0.4];
        let a = soft_assign(&params, &x).unwrap();
        let b = soft_assign(&shifted, &x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_assign_is_probability_vector() {
        let mut rng = SeededRng::new(5);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
            let centers = Matrix::from_rows(&rows).unwrap();
            let params = coupled_params(&centers, 10.0).unwrap();
            let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let a = soft_assign(&params, &x).unwrap();
            assert!(a.iter().all(|&v| v >= 0.0));
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coupled_equidistant_point_splits_evenly() {
        let centers = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        for &alpha in &[0.5, 5.0, 50.0] {
            let params = coupled_params(&centers, alpha).unwrap();
            let a = soft_assign(&params, &[1.0, 0.0]).unwrap();
            assert!((a[0] - 0.5).abs() < 1e-12, "alpha {alpha}");
            assert!((a[1] - 0.5).abs() < 1e-12, "alpha {alpha}");
        }
    }

    #[test]
    fn coupled_sharp_assignment_at_center() {
        let centers = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.5, 0.0], vec![0.0, -2.0]]).unwrap();
        let params = coupled_params(&centers, 50.0).unwrap();
        let a = soft_assign(&params, &[0.0, 0.0]).unwrap();
        assert!(a[0] >= 1.0 - 1e-9, "got {}", a[0]);
    }

    #[test]
    fn coupled_matches_distance_oracle() {
        let mut rng = SeededRng::new(6);
        for _ in 0..30 {
            let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
            let centers = Matrix::from_rows(&rows).unwrap();
            let alpha = 0.3 + 5.0 * rng.next_f64();
            let params = coupled_params(&centers, alpha).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let got = soft_assign(&params, &x).unwrap();
            let want = gaussian_assign(&centers, alpha, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn zero_residual_embedding_stays_zero() {
        // Every center equals x, so all residuals vanish and the zero guard
        // returns the zero vector unchanged.
        let x = [0.7, -0.3];
        let centers = Matrix::from_rows(&[x.to_vec(), x.to_vec()]).unwrap();
        let params = coupled_params(&centers, 100.0).unwrap();
        let e = embed(&params, &x).unwrap();
        assert!(e.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_case_two_clusters() {
        let centers = Matrix::from_rows(&[vec![0.0, 0.0], vec![10.0, 10.0]]).unwrap();
        let params = coupled_params(&centers, 5.0).unwrap();
        let e = embed(&params, &[1.0, 0.0]).unwrap();
        // Near-hard assignment: block 0 carries the residual (1,0), block 1
        // nothing; after normalization the result is (1,0,0,0).
        assert!((e.data[0] - 1.0).abs() < 1e-6);
        assert!(e.data[1].abs() < 1e-6);
        assert!(e.data[2].abs() < 1e-6);
        assert!(e.data[3].abs() < 1e-6);
        assert!((norm2(&e.data) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embeddings_are_unit_norm_unless_zero() {
        let mut rng = SeededRng::new(7);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let centers = Matrix::from_rows(&rows).unwrap();
        let params = coupled_params(&centers, 3.0).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let e = embed(&params, &x).unwrap();
            assert!((norm2(&e.data) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vlad_hard_tie_goes_to_lowest_index() {
        let centers = Matrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let e = vlad_hard(&centers, &[1.0]);
        assert_eq!(e.data, vec![1.0, 0.0]); // residual lands in block 0
    }

    #[test]
    fn vlad_hard_hand_case() {
        let centers = Matrix::from_rows(&[vec![0.0, 0.0], vec![10.0, 10.0]]).unwrap();
        let e = vlad_hard(&centers, &[1.0, 0.0]);
        assert_eq!(e.data, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn alpha_limit_matches_hard_vlad() {
        let mut rng = SeededRng::new(11);
        for seed in 0..25u64 {
            let mut srng = SeededRng::new(seed);
            // Centers on a grid, pairwise separation >= 1.
            let rows: Vec<Vec<f64>> = (0..4)
                .map(|c| vec![(c % 2) as f64 * 2.0, (c / 2) as f64 * 2.0, srng.normal() * 0.01])
                .collect();
            let centers = Matrix::from_rows(&rows).unwrap();
            let params = coupled_params(&centers, 100.0).unwrap();
            let pick = rng.gen_range(4);
            let x: Vec<f64> = centers
                .row(pick)
                .iter()
                .map(|v| v + 0.1 * (srng.next_f64() - 0.5))
                .collect();
            let soft = embed_raw(&params, &x).unwrap();
            let hard = vlad_hard(&centers, &x);
            for (s, h) in soft.iter().zip(&hard.data) {
                assert!((s - h).abs() < 1e-6, "seed {seed}: {s} vs {h}");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let centers = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let params = coupled_params(&centers, 2.0).unwrap();
        let g = embed_backward(&params, &[0.4, 0.2], &vec![0.0; 4]).unwrap();
        assert!(g.x.iter().all(|&v| v == 0.0));
        assert!(g.centers.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.biases.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradients_sum_to_zero() {
        let mut rng = SeededRng::new(13);
        for _ in 0..10 {
            let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
            let centers = Matrix::from_rows(&rows).unwrap();
            let params = coupled_params(&centers, 1.5).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let upstream: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
            let g = embed_backward(&params, &x, &upstream).unwrap();
            assert!(g.biases.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    /// Central-difference oracle for one scalar probe of the embedding.
    fn fd_check(params: &NetVladParams, x: &[f64], upstream: &[f64]) {
        let h = 1e-5;
        let probe = |p: &NetVladParams, xv: &[f64]| -> f64 {
            dot(embed(p, xv).unwrap().as_slice(), upstream)
        };
        let rel = |a: f64, f: f64| (a - f).abs() / f64::max(a.abs().max(f.abs()), 1e-6);
        let g = embed_backward(params, x, upstream).unwrap();

        for j in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let fd = (probe(params, &xp) - probe(params, &xm)) / (2.0 * h);
            assert!(rel(g.x[j], fd) <= 1e-4, "x[{j}]: {} vs {}", g.x[j], fd);
        }
        for r in 0..params.clusters() {
            for c in 0..params.dim() {
                for (which, analytic) in [(0, g.centers.get(r, c)), (1, g.weights.get(r, c))] {
                    let mut pp = params.clone();
                    let mut pm = params.clone();
                    let (mp, mm) = if which == 0 {
                        (&mut pp.centers, &mut pm.centers)
                    } else {
                        (&mut pp.weights, &mut pm.weights)
                    };
                    mp.set(r, c, mp.get(r, c) + h);
                    mm.set(r, c, mm.get(r, c) - h);
                    let fd = (probe(&pp, x) - probe(&pm, x)) / (2.0 * h);
                    assert!(
                        rel(analytic, fd) <= 1e-4,
                        "param {which} [{r}][{c}]: {analytic} vs {fd}"
                    );
                }
            }
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.biases[r] += h;
            pm.biases[r] -= h;
            let fd = (probe(&pp, x) - probe(&pm, x)) / (2.0 * h);
            assert!(rel(g.biases[r], fd) <= 1e-4, "b[{r}]: {} vs {}", g.biases[r], fd);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(15);
        for _ in 0..5 {
            let k = 4;
            let d = 8;
            let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
            let centers = Matrix::from_rows(&rows).unwrap();
            let mut params = coupled_params(&centers, 1.0).unwrap();
            // Decouple so all three parameter sets are independent.
            for r in 0..k {
                for c in 0..d {
                    params.weights.set(r, c, rng.normal());
                }
                params.biases[r] = 0.3 * rng.normal();
            }
            let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let upstream: Vec<f64> = (0..k * d).map(|_| rng.normal()).collect();
            fd_check(&params, &x, &upstream);
        }
    }

    #[test]
    fn kmeans_exact_fit_when_samples_equal_clusters() {
        let rows = vec![
            vec![0.0, 0.0],
            vec![5.0, 0.0],
            vec![0.0, 5.0],
            vec![5.0, 5.0],
        ];
        let sample = Matrix::from_rows(&rows).unwrap();
        let mut rng = SeededRng::new(3);
        let (centers, history) = kmeans(&sample, 4, &mut rng);
        // Every input point is a center (in some order).
        for row in &rows {
            let found = (0..4).any(|c| {
                centers
                    .row(c)
                    .iter()
                    .zip(row)
                    .all(|(a, b)| (a - b).abs() < 1e-12)
            });
            assert!(found, "missing center {row:?}");
        }
        assert!(history.last().unwrap().abs() < 1e-12);
    }

    #[test]
    fn kmeans_objective_is_non_increasing() {
        let mut rng = SeededRng::new(21);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let sample = Matrix::from_rows(&rows).unwrap();
        let (_, history) = kmeans(&sample, 6, &mut rng);
        assert!(history.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{history:?}");
    }

    #[test]
    fn random_init_is_deterministic() {
        let sample = Matrix::zeros(10, 4);
        let a = init_params(&sample, 5, 1.0, InitMode::Random, &mut SeededRng::new(9)).unwrap();
        let b = init_params(&sample, 5, 1.0, InitMode::Random, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a.centers().data(), b.centers().data());
        assert_eq!(a.weights().data(), b.weights().data());
        assert_eq!(a.biases(), b.biases());
        assert!(a.biases().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_kmeans_rejects_small_samples() {
        let sample = Matrix::zeros(3, 4);
        assert!(matches!(
            init_params(&sample, 5, 1.0, InitMode::KMeans, &mut SeededRng::new(1)),
            Err(NetVladError::TooFewSamples { have: 3, need: 5 })
        ));
    }

    #[test]
    fn params_round_trip_at_f32_precision() {
        let mut rng = SeededRng::new(31);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let centers = Matrix::from_rows(&rows).unwrap();
        let params = coupled_params(&centers, 7.0).unwrap();
        let restored = parse_params(&encode_params(&params)).unwrap();
        assert_eq!(restored.clusters(), 3);
        assert_eq!(restored.dim(), 4);
        for (a, b) in params.centers().data().iter().zip(restored.centers().data()) {
            assert_eq!(*a as f32, *b as f32);
        }
        for (a, b) in params.biases().iter().zip(restored.biases()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn params_io_error_cases() {
        assert!(matches!(parse_params(b"XXXXX\n1 1\n"), Err(NetVladError::BadMagic)));
        let centers = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let params = coupled_params(&centers, 1.0).unwrap();
        let mut bytes = encode_params(&params);
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(parse_params(&bytes), Err(NetVladError::Truncated(_))));
    }
}
