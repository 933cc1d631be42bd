//! Deterministic dense linear algebra and seeded random numbers.
//!
//! Everything here is plain sequential f64 arithmetic: identical inputs give
//! bit-identical outputs on every platform, which the rest of the pipeline
//! relies on for reproducible runs.

use thiserror::Error;

/// Absolute tolerance for symmetry checks on input matrices.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Smallest ridge regularizer accepted; keeps `gram + lambda*I` positive definite.
pub const MIN_RIDGE_LAMBDA: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("matrix is not symmetric within {SYMMETRY_TOL:e}")]
    NotSymmetric,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not positive definite after regularization")]
    NotPositiveDefinite,
}

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumericsError::ShapeMismatch("ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(r, c, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * v` for a column vector `v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "mul_vec length mismatch");
        (0..self.rows)
            .map(|r| dot(self.row(r), v))
            .collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                worst = worst.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        worst
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Solves `(gram + lambda*I) a = rhs` for a symmetric PSD `gram` by Cholesky
/// factorization. `lambda` is floored at [`MIN_RIDGE_LAMBDA`].
pub fn ridge_solve(gram: &Matrix, rhs: &[f64], lambda: f64) -> Result<Vec<f64>, NumericsError> {
    let n = gram.rows();
    if gram.cols() != n || rhs.len() != n {
        return Err(NumericsError::ShapeMismatch(format!(
            "gram {}x{} with rhs of length {}",
            gram.rows(),
            gram.cols(),
            rhs.len()
        )));
    }
    if !gram.is_finite() || !rhs.iter().all(|v| v.is_finite()) || !lambda.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    if gram.max_asymmetry() > SYMMETRY_TOL {
        return Err(NumericsError::NotSymmetric);
    }
    let lambda = lambda.max(MIN_RIDGE_LAMBDA);

    // Lower-triangular Cholesky of the symmetrized, regularized system.
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let a_ij = 0.5 * (gram.get(i, j) + gram.get(j, i)) + if i == j { lambda } else { 0.0 };
            let mut s = a_ij;
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(NumericsError::NotPositiveDefinite);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }

    // Forward substitution L y = rhs, then back substitution L^T a = y.
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut s = rhs[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut a = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * a[k];
        }
        a[i] = s / l[i * n + i];
    }
    Ok(a)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues sorted descending and the matching eigenvectors as
/// columns of an orthonormal matrix. Each eigenvector is sign-fixed so its
/// first component larger than 1e-12 in magnitude is positive.
pub fn sym_eig(m: &Matrix) -> Result<(Vec<f64>, Matrix), NumericsError> {
    let n = m.rows();
    if m.cols() != n {
        return Err(NumericsError::ShapeMismatch(format!(
            "expected square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    if m.max_asymmetry() > SYMMETRY_TOL {
        return Err(NumericsError::NotSymmetric);
    }

    // Work on the symmetrized copy so rotations stay exactly symmetric.
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (m.get(i, j) + m.get(j, i));
        }
    }
    let mut v = Matrix::identity(n);

    let fro: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off_target = 1e-14 * fro.max(1.0);

    for _sweep in 0..100 {
        let mut off_sq = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off_sq += a[i * n + j] * a[i * n + j];
            }
        }
        if (2.0 * off_sq).sqrt() <= off_target {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for i in 0..n {
                    if i != p && i != q {
                        let aip = a[i * n + p];
                        let aiq = a[i * n + q];
                        a[i * n + p] = c * aip - s * aiq;
                        a[p * n + i] = a[i * n + p];
                        a[i * n + q] = s * aip + c * aiq;
                        a[q * n + i] = a[i * n + q];
                    }
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;

                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }

    // Sort eigenpairs descending; stable order keeps ties deterministic.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());

    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let mut sign = 1.0;
        for i in 0..n {
            let x = v.get(i, src);
            if x.abs() > 1e-12 {
                sign = if x > 0.0 { 1.0 } else { -1.0 };
                break;
            }
        }
        for i in 0..n {
            vectors.set(i, col, sign * v.get(i, src));
        }
    }
    Ok((eigenvalues, vectors))
}

/// Counter-based, platform-independent random generator.
///
/// The stream is xoshiro256++ (Blackman & Vigna) seeded by four consecutive
/// outputs of splitmix64 applied to the user seed; floats take the top 53
/// bits, normals come from the Box–Muller transform, and bounded integers use
/// Lemire's debiased multiply. The same seed yields the same stream on every
/// platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: [u64; 4],
    cached_normal: Option<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        let state = [
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
        ];
        Self { state, cached_normal: None }
    }

    /// Derives an independent child stream; advances this stream by one draw.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn gen_range(&mut self, n: usize) -> usize {
        assert!(n > 0, "gen_range upper bound must be positive");
        let n = n as u64;
        let mut x = self.next_u64();
        let mut m = u128::from(x) * u128::from(n);
        let mut low = m as u64;
        if low < n {
            let threshold = n.wrapping_neg() % n;
            while low < threshold {
                x = self.next_u64();
                m = u128::from(x) * u128::from(n);
                low = m as u64;
            }
        }
        (m >> 64) as usize
    }

    /// Standard normal deviate via Box–Muller; pairs are cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.gen_range(i + 1);
            slice.swap(i, j);
        }
    }

    /// Samples `k` distinct indices from `0..n` without replacement,
    /// returned in ascending order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.gen_range(n - i);
            pool.swap(i, j);
        }
        let mut picked: Vec<usize> = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_psd(n: usize, rng: &mut SeededRng) -> Matrix {
        // A^T A + I is symmetric positive definite by construction.
        let mut a = Matrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                a.set(r, c, rng.normal());
            }
        }
        let mut g = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += a.get(k, i) * a.get(k, j);
                }
                g.set(i, j, s + if i == j { 1.0 } else { 0.0 });
            }
        }
        g
    }

    /// Gauss-Jordan inverse, used only as an independent oracle.
    fn gauss_jordan_inverse(m: &Matrix) -> Matrix {
        let n = m.rows();
        let mut aug = vec![vec![0.0f64; 2 * n]; n];
        for i in 0..n {
            for j in 0..n {
                aug[i][j] = m.get(i, j);
            }
            aug[i][n + i] = 1.0;
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&a, &b| aug[a][col].abs().partial_cmp(&aug[b][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, pivot);
            let p = aug[col][col];
            for j in 0..2 * n {
                aug[col][j] /= p;
            }
            for i in 0..n {
                if i != col {
                    let f = aug[i][col];
                    for j in 0..2 * n {
                        aug[i][j] -= f * aug[col][j];
                    }
                }
            }
        }
        let mut inv = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                inv.set(i, j, aug[i][n + j]);
            }
        }
        inv
    }

    #[test]
    fn splitmix64_reference_vector() {
        // First outputs for seed 0, from the reference implementation.
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(&mut s), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(splitmix64(&mut s), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn rng_stream_is_reproducible() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SeededRng::new(43);
        assert_ne!(SeededRng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn gen_range_covers_all_values() {
        let mut rng = SeededRng::new(7);
        let mut seen = [false; 5];
        for _ in 0..200 {
            let v = rng.gen_range(5);
            assert!(v < 5);
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn sample_indices_sorted_and_distinct() {
        let mut rng = SeededRng::new(9);
        let picked = rng.sample_indices(100, 30);
        assert_eq!(picked.len(), 30);
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
        assert!(picked.iter().all(|&i| i < 100));
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = SeededRng::new(11);
        let n = 50_000;
        let samples: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn ridge_scalar_case() {
        let gram = Matrix::new(1, 1, vec![0.0]).unwrap();
        let a = ridge_solve(&gram, &[1.0], 1.0).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_identity_case() {
        let gram = Matrix::identity(2);
        let a = ridge_solve(&gram, &[1.0, 1.0], 1.0).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-12);
        assert!((a[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ridge_matches_dense_inverse_oracle() {
        let mut rng = SeededRng::new(8);
        let gram = rand_psd(8, &mut rng);
        let rhs: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let lambda = 1000.0;

        let a = ridge_solve(&gram, &rhs, lambda).unwrap();

        let mut reg = gram.clone();
        for i in 0..8 {
            reg.set(i, i, reg.get(i, i) + lambda);
        }
        let inv = gauss_jordan_inverse(&reg);
        let expected = inv.mul_vec(&rhs);
        for (x, y) in a.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn ridge_residual_bound_over_many_seeds() {
        for seed in 0..100u64 {
            let mut rng = SeededRng::new(seed);
            let n = 3 + (seed as usize % 10);
            let gram = rand_psd(n, &mut rng);
            let rhs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let lambda = 10.0f64.powi((seed % 7) as i32 - 3);
            let a = ridge_solve(&gram, &rhs, lambda).unwrap();
            let mut worst = 0.0f64;
            let rhs_norm = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..n {
                let lhs = dot(gram.row(i), &a) + lambda * a[i];
                worst = worst.max((lhs - rhs[i]).abs());
            }
            assert!(
                worst <= 1e-8 * (1.0 + rhs_norm),
                "seed {seed}: residual {worst}"
            );
        }
    }

    #[test]
    fn ridge_rejects_bad_inputs() {
        let gram = Matrix::new(2, 2, vec![1.0, 0.5, 0.4, 1.0]).unwrap();
        assert_eq!(
            ridge_solve(&gram, &[1.0, 1.0], 1.0),
            Err(NumericsError::NotSymmetric)
        );
        let ok = Matrix::identity(2);
        assert_eq!(
            ridge_solve(&ok, &[f64::NAN, 1.0], 1.0),
            Err(NumericsError::NonFinite)
        );
    }

    #[test]
    fn sym_eig_diagonal_case() {
        let m = Matrix::new(3, 3, vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let (vals, vecs) = sym_eig(&m).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 2.0).abs() < 1e-12);
        assert!((vals[2] - 1.0).abs() < 1e-12);
        // Eigenvectors are permuted identity columns: 0, 2, 1.
        let expected_cols = [0usize, 2, 1];
        for (col, &row) in expected_cols.iter().enumerate() {
            for i in 0..3 {
                let want = if i == row { 1.0 } else { 0.0 };
                assert!((vecs.get(i, col) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sym_eig_two_by_two_hand_case() {
        // Characteristic polynomial of [[2,1],[1,2]] gives eigenvalues 3 and 1.
        let m = Matrix::new(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (vals, _) = sym_eig(&m).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sym_eig_reconstruction_oracle() {
        let mut rng = SeededRng::new(17);
        let n = 10;
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = rng.normal();
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        let (vals, vecs) = sym_eig(&m).unwrap();

        // V Lambda V^T must reconstruct m.
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += vecs.get(i, k) * vals[k] * vecs.get(j, k);
                }
                worst = worst.max((s - m.get(i, j)).abs());
            }
        }
        assert!(worst < 1e-8, "reconstruction error {worst}");

        // V^T V = I.
        for a in 0..n {
            for b in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += vecs.get(k, a) * vecs.get(k, b);
                }
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-8);
            }
        }

        assert!(vals.windows(2).all(|w| w[0] >= w[1]), "descending order");
    }

    #[test]
    fn sym_eig_sign_convention() {
        let mut rng = SeededRng::new(23);
        for _ in 0..5 {
            let n = 6;
            let mut m = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let v = rng.normal();
                    m.set(i, j, v);
                    m.set(j, i, v);
                }
            }
            let (_, vecs) = sym_eig(&m).unwrap();
            for col in 0..n {
                let first = (0..n)
                    .map(|i| vecs.get(i, col))
                    .find(|x| x.abs() > 1e-12)
                    .unwrap();
                assert!(first > 0.0, "column {col} sign convention violated");
            }
        }
    }

    #[test]
    fn sym_eig_rejects_asymmetry() {
        let m = Matrix::new(2, 2, vec![1.0, 0.5, 0.3, 1.0]).unwrap();
        assert!(matches!(sym_eig(&m), Err(NumericsError::NotSymmetric)));
    }

    #[test]
    fn matrix_validates_shape_and_finiteness() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
    }
}
