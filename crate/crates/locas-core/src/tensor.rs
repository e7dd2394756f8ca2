//! Dense matrix/vector numerics used everywhere else.
//!
//! Conventions: matrices are row-major `Vec<f64>`; vectors are plain
//! `Vec<f64>` (the dimension is the length). All math is double precision.
//! Everything here is a pure function — with a fixed seed and single-threaded
//! execution results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{LocasError, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Build from a flat row-major buffer. Checks length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LocasError::Shape(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(LocasError::Numerical("matrix entries must be finite".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LocasError::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// y = M · x, x of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// y = Mᵀ · x, x of length `rows`. Accumulates row-wise so the inner
    /// loop stays contiguous.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            axpy(&mut out, x[i], self.row(i));
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// Append one column (used by growable key matrices).
    pub fn push_col(&mut self, col: &[f64]) {
        assert_eq!(col.len(), self.rows.max(if self.cols == 0 { col.len() } else { self.rows }));
        if self.cols == 0 && self.rows == 0 {
            self.rows = col.len();
        }
        let (r, c) = (self.rows, self.cols);
        let mut data = Vec::with_capacity(r * (c + 1));
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
            data.push(col[i]);
        }
        self.cols += 1;
        self.data = data;
    }

    /// Append one row.
    pub fn push_row(&mut self, row: &[f64]) {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Gram matrix of the rows: G = M · Mᵀ (rows × rows, symmetric).
    pub fn gram_of_rows(&self) -> Matrix {
        let n = self.rows;
        let mut g = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = dot(self.row(i), self.row(j));
                g.set(i, j, v);
                g.set(j, i, v);
            }
        }
        g
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ── Vector helpers ───────────────────────────────────────────────────

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// y += alpha * x
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for i in 0..y.len() {
        y[i] += alpha * x[i];
    }
}

#[inline]
pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

#[inline]
pub fn scale(x: &mut [f64], alpha: f64) {
    for v in x.iter_mut() {
        *v *= alpha;
    }
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

// ── Activations ──────────────────────────────────────────────────────

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Element-wise nonlinearity. GeLU uses the tanh approximation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Silu,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * logistic(x),
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    /// Derivative at x.
    #[inline]
    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = logistic(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }

    /// Checked element-wise application. Non-finite input is rejected.
    pub fn apply(self, x: &[f64]) -> Result<Vec<f64>> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(LocasError::Numerical("activation input must be finite".into()));
        }
        Ok(x.iter().map(|&v| self.eval(v)).collect())
    }
}

// ── Row normalization ────────────────────────────────────────────────

/// Outcome of [`normalize_rows`]: rows with norm below the floor are left
/// unchanged and listed in `skipped`.
#[derive(Clone, Debug)]
pub struct RowNormalization {
    pub matrix: Matrix,
    pub norms: Vec<f64>,
    pub skipped: Vec<usize>,
}

/// Scale each row to unit L2 norm, returning the original norms.
pub fn normalize_rows(m: &Matrix, floor: f64) -> RowNormalization {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    let mut skipped = Vec::new();
    for i in 0..m.rows() {
        let n = l2_norm(m.row(i));
        norms.push(n);
        if n < floor || n == 0.0 {
            skipped.push(i);
        } else {
            scale(out.row_mut(i), 1.0 / n);
        }
    }
    RowNormalization { matrix: out, norms, skipped }
}

// ── Global gradient normalization ────────────────────────────────────

/// Normalize a per-layer family of gradient vectors so that their
/// concatenation has unit L2 norm. Per-entry ratios are preserved.
pub fn global_normalize(layers: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let total: f64 = layers.iter().map(|v| dot(v, v)).sum();
    let norm = total.sqrt();
    if norm == 0.0 {
        return Err(LocasError::DegenerateGradient(
            "all-zero gradient cannot be normalized".into(),
        ));
    }
    if !norm.is_finite() {
        return Err(LocasError::Numerical("non-finite gradient norm".into()));
    }
    Ok(layers
        .iter()
        .map(|v| v.iter().map(|x| x / norm).collect())
        .collect())
}

// ── Symmetric eigendecomposition (cyclic Jacobi) ─────────────────────

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
///
/// Returns (U, eigenvalues) with orthonormal eigenvector columns and
/// eigenvalues sorted descending (stable tie-break by original index).
/// The input must be symmetric within `tol` (relative to its Frobenius
/// norm), and the reconstruction U·diag(λ)·Uᵀ matches the input to the
/// same relative tolerance.
pub fn symmetric_evd(s: &Matrix, tol: f64) -> Result<(Matrix, Vec<f64>)> {
    let n = s.rows();
    if n != s.cols() {
        return Err(LocasError::Shape(format!("matrix must be square, got {}x{}", n, s.cols())));
    }
    let fro = s.frobenius_norm();
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((s.get(i, j) - s.get(j, i)).abs());
        }
    }
    if asym > tol * fro.max(1e-300) {
        return Err(LocasError::Shape(format!(
            "matrix is not symmetric within tolerance (asymmetry {asym:.3e})"
        )));
    }

    // Work on the symmetrized copy.
    let mut a = s.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let mut u = Matrix::identity(n);

    let off = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += a.get(i, j).abs();
            }
        }
        s
    };

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off(&a) <= 1e-300 + 1e-15 * fro {
            converged = true;
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta.abs() > 1e150 {
                    // Avoid overflow in theta^2.
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                let tau = sn / (1.0 + c);

                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for i in 0..n {
                    if i != p && i != q {
                        let aip = a.get(i, p);
                        let aiq = a.get(i, q);
                        let new_ip = aip - sn * (aiq + tau * aip);
                        let new_iq = aiq + sn * (aip - tau * aiq);
                        a.set(i, p, new_ip);
                        a.set(p, i, new_ip);
                        a.set(i, q, new_iq);
                        a.set(q, i, new_iq);
                    }
                }
                for i in 0..n {
                    let uip = u.get(i, p);
                    let uiq = u.get(i, q);
                    u.set(i, p, uip - sn * (uiq + tau * uip));
                    u.set(i, q, uiq + sn * (uip - tau * uiq));
                }
            }
        }
    }
    if !converged && off(&a) > 1e-300 + 1e-15 * fro {
        return Err(LocasError::Numerical(format!(
            "Jacobi sweeps did not converge within {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    // Sort eigenpairs descending, stable in the original index.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(j, j).partial_cmp(&a.get(i, i)).unwrap().then(i.cmp(&j))
    });
    let eigvals: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut sorted_u = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            sorted_u.set(i, new_j, u.get(i, old_j));
        }
    }
    Ok((sorted_u, eigvals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn relu_basics() {
        let out = Activation::Relu.apply(&[-1.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.0, 2.0]);
    }

    #[test]
    fn silu_at_zero_and_one() {
        let out = Activation::Silu.apply(&[0.0]).unwrap();
        assert_eq!(out[0], 0.0);
        // Scalar oracle: 1 / (1 + e^-1).
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        let out = Activation::Silu.apply(&[1.0]).unwrap();
        assert!((out[0] - expect).abs() < 1e-15);
        assert!((out[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn activation_rejects_non_finite() {
        let err = Activation::Relu.apply(&[f64::NAN]).unwrap_err();
        assert_eq!(err.category(), "NumericalError");
    }

    #[test]
    fn activations_match_scalar_oracle() {
        // Brute-force scalar formulas at 1e3 random points.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-6.0..6.0);
            let relu = if x > 0.0 { x } else { 0.0 };
            let silu = x / (1.0 + (-x).exp());
            assert!((Activation::Relu.eval(x) - relu).abs() < 1e-12);
            assert!((Activation::Silu.eval(x) - silu).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_grads_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let h = 1e-6;
        for kind in [Activation::Relu, Activation::Silu, Activation::Gelu] {
            for _ in 0..200 {
                let x: f64 = rng.gen_range(-4.0..4.0);
                if kind == Activation::Relu && x.abs() < 1e-3 {
                    continue; // kink
                }
                let fd = (kind.eval(x + h) - kind.eval(x - h)) / (2.0 * h);
                assert!(
                    (kind.grad(x) - fd).abs() < 1e-7,
                    "{kind:?} grad mismatch at {x}"
                );
            }
        }
    }

    #[test]
    fn normalize_rows_three_four_five() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let out = normalize_rows(&m, 1e-12);
        assert_eq!(out.norms, vec![5.0]);
        assert!(max_abs_diff(out.matrix.row(0), &[0.6, 0.8]) < 1e-15);
        assert!(out.skipped.is_empty());
    }

    #[test]
    fn normalize_rows_flags_zero_row() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let out = normalize_rows(&m, 1e-12);
        assert_eq!(out.skipped, vec![0]);
        assert_eq!(out.matrix.row(0), &[0.0, 0.0]);
        assert_eq!(out.norms[1], 1.0);
    }

    #[test]
    fn normalize_rows_identity_unchanged() {
        let m = Matrix::identity(3);
        let out = normalize_rows(&m, 1e-12);
        assert_eq!(out.matrix, m);
        assert_eq!(out.norms, vec![1.0; 3]);
    }

    #[test]
    fn global_normalize_single_entry() {
        let out = global_normalize(&[vec![0.0, 5.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(out[0], vec![0.0, 1.0]);
        assert_eq!(out[1], vec![0.0, 0.0]);
    }

    #[test]
    fn global_normalize_across_layers() {
        let out = global_normalize(&[vec![3.0], vec![4.0]]).unwrap();
        assert!((out[0][0] - 0.6).abs() < 1e-15);
        assert!((out[1][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn global_normalize_rejects_zero() {
        let err = global_normalize(&[vec![0.0; 4], vec![0.0; 4]]).unwrap_err();
        assert_eq!(err.category(), "DegenerateGradient");
    }

    #[test]
    fn evd_identity() {
        let (u, vals) = symmetric_evd(&Matrix::identity(2), 1e-10).unwrap();
        assert_eq!(vals, vec![1.0, 1.0]);
        assert_eq!(u, Matrix::identity(2));
    }

    #[test]
    fn evd_diagonal() {
        let m = Matrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (u, vals) = symmetric_evd(&m, 1e-10).unwrap();
        assert_eq!(vals, vec![4.0, 1.0]);
        // Permutation-signed identity.
        for j in 0..2 {
            let col = u.col(j);
            let nonzero: Vec<f64> = col.iter().cloned().filter(|v| v.abs() > 0.5).collect();
            assert_eq!(nonzero.len(), 1);
            assert!((nonzero[0].abs() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn evd_two_by_two_hand_case() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1 with eigenvectors
        // (1,1)/sqrt(2) and (1,-1)/sqrt(2); verified via reconstruction.
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (u, vals) = symmetric_evd(&m, 1e-10).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        let s = 1.0 / 2.0f64.sqrt();
        let c0 = u.col(0);
        assert!((c0[0].abs() - s).abs() < 1e-12 && (c0[1].abs() - s).abs() < 1e-12);
        assert!((c0[0] - c0[1]).abs() < 1e-12, "first eigenvector is (1,1) direction");
        // Reconstruction.
        for i in 0..2 {
            for j in 0..2 {
                let rec: f64 = (0..2).map(|k| u.get(i, k) * vals[k] * u.get(j, k)).sum();
                assert!((rec - m.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evd_rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let err = symmetric_evd(&m, 1e-10).unwrap_err();
        assert_eq!(err.category(), "ShapeError");
    }

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.gen_range(-1.0..1.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    #[test]
    fn evd_reconstruction_and_orthonormality() {
        for (n, seed) in [(3usize, 1u64), (8, 2), (17, 3), (32, 4)] {
            let m = random_symmetric(n, seed);
            let (u, vals) = symmetric_evd(&m, 1e-10).unwrap();
            // Descending order.
            for w in vals.windows(2) {
                assert!(w[0] >= w[1]);
            }
            let fro = m.frobenius_norm();
            let mut rec_err: f64 = 0.0;
            let mut orth_err: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let rec: f64 = (0..n).map(|k| u.get(i, k) * vals[k] * u.get(j, k)).sum();
                    rec_err += (rec - m.get(i, j)).powi(2);
                    let g: f64 = (0..n).map(|k| u.get(k, i) * u.get(k, j)).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    orth_err = orth_err.max((g - expect).abs());
                }
            }
            assert!(rec_err.sqrt() < 1e-10 * fro.max(1.0), "reconstruction failed n={n}");
            assert!(orth_err < 1e-10, "orthonormality failed n={n}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_normalize_rows_idempotent(seed in 0u64..1000, rows in 1usize..6, cols in 1usize..6) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut m = Matrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    m.set(i, j, rng.gen_range(-2.0..2.0f64));
                }
            }
            let once = normalize_rows(&m, 1e-12);
            let twice = normalize_rows(&once.matrix, 1e-12);
            for i in 0..rows {
                if once.skipped.contains(&i) { continue; }
                prop_assert!((twice.norms[i] - 1.0).abs() < 1e-12);
                prop_assert!(max_abs_diff(once.matrix.row(i), twice.matrix.row(i)) < 1e-12);
            }
        }

        #[test]
        fn prop_global_normalize_unit_norm(seed in 0u64..1000, layers in 1usize..4, dim in 1usize..8) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let grads: Vec<Vec<f64>> = (0..layers)
                .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0f64)).collect())
                .collect();
            let total: f64 = grads.iter().map(|v| dot(v, v)).sum();
            prop_assume!(total > 1e-12);
            let out = global_normalize(&grads).unwrap();
            let norm: f64 = out.iter().map(|v| dot(v, v)).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
            // Per-entry ratios preserved against a reference entry.
            let scale = grads[0].iter().chain(grads.last().unwrap()).cloned().find(|v| v.abs() > 1e-9);
            if let Some(_s) = scale {
                for (g, o) in grads.iter().zip(&out) {
                    for (gv, ov) in g.iter().zip(o) {
                        prop_assert!((gv - ov * total.sqrt()).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn prop_evd_random_symmetric(seed in 0u64..500, n in 2usize..12) {
            let m = random_symmetric(n, seed);
            let (u, vals) = symmetric_evd(&m, 1e-10).unwrap();
            let mut rec_err: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let rec: f64 = (0..n).map(|k| u.get(i, k) * vals[k] * u.get(j, k)).sum();
                    rec_err = rec_err.max((rec - m.get(i, j)).abs());
                }
            }
            prop_assert!(rec_err < 1e-10 * m.frobenius_norm().max(1.0));
        }
    }
}
