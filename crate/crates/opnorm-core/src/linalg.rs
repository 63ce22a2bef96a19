//! Dense matrix/vector core with deterministic double-precision arithmetic.
//!
//! Matrices are row-major with `rows` = fan-out and `cols` = fan-in; this
//! orientation convention is used throughout the workspace. The module ships
//! a one-sided Jacobi SVD as the reference decomposition and a seeded
//! power-iteration estimator for the spectral norm.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Maximum number of Jacobi sweeps before [`svd`] reports non-convergence.
pub const SVD_MAX_SWEEPS: usize = 60;

/// Relative off-diagonal tolerance for the Jacobi rotation criterion.
pub const SVD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("dimension mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("non-finite entry at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },
    #[error("empty dimension: {0}")]
    EmptyDimension(String),
    #[error("SVD did not converge within {max_sweeps} Jacobi sweeps")]
    SvdNoConvergence { max_sweeps: usize },
}

/// Dense column vector of `f64` entries.
///
/// Public constructors reject empty and non-finite data.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.is_empty() {
            return Err(LinalgError::EmptyDimension(String::from("vector length 0")));
        }
        check_finite(&data)?;
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> f64) -> Self {
        Self {
            data: (0..len).map(|i| f(i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        dot(&self.data, &other.data)
    }

    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn scale(&self, c: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|&x| c * x).collect(),
        }
    }

    /// `self + c * other`, entrywise.
    pub fn add_scaled(&self, c: f64, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + c * b)
                .collect(),
        }
    }

    /// Entrywise (Hadamard) product.
    pub fn hadamard(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a * b)
                .collect(),
        }
    }
}

impl core::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl core::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Dense row-major matrix. `rows` is the fan-out dimension and `cols` the
/// fan-in dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyDimension(format!("{rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DimMismatch {
                left_rows: rows,
                left_cols: cols,
                right_rows: data.len(),
                right_cols: 1,
            });
        }
        check_finite(&data)?;
        Ok(Self { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { data, rows, cols }
    }

    /// Rank-one matrix `u * v^T`.
    pub fn outer(u: &Vector, v: &Vector) -> Self {
        Self::from_fn(u.len(), v.len(), |r, c| u[r] * v[c])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|&x| c * x).collect(),
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// `self + c * other`, entrywise.
    pub fn add_scaled(&self, c: f64, other: &Matrix) -> Matrix {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + c * b)
                .collect(),
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    /// Matrix-vector product `self * x`.
    pub fn mat_vec(&self, x: &Vector) -> Result<Vector, LinalgError> {
        if self.cols != x.len() {
            return Err(LinalgError::DimMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: x.len(),
                right_cols: 1,
            });
        }
        Ok(Vector {
            data: (0..self.rows).map(|r| dot(self.row(r), x.as_slice())).collect(),
        })
    }

    /// Transposed matrix-vector product `self^T * x` without materializing
    /// the transpose.
    pub fn mat_vec_transposed(&self, x: &Vector) -> Result<Vector, LinalgError> {
        if self.rows != x.len() {
            return Err(LinalgError::DimMismatch {
                left_rows: self.cols,
                left_cols: self.rows,
                right_rows: x.len(),
                right_cols: 1,
            });
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            let row = self.row(r);
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xr * w;
            }
        }
        Ok(Vector { data: out })
    }
}

impl core::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Singular value decomposition `a = u * diag(s) * v^T` with `r = min(rows, cols)`.
///
/// Columns of `u` (rows x r) and `v` (cols x r) are orthonormal and `s` is
/// nonnegative in descending order.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vector,
    pub v: Matrix,
}

/// Standard product `a * b` with deterministic row-major, left-to-right
/// accumulation order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimMismatch {
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    // ikj order: accumulates each output row left-to-right over k, which is
    // both deterministic and cache-friendly on row-major data.
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate().take(k) {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Matrix {
        data: out,
        rows: m,
        cols: n,
    })
}

/// One-sided Jacobi SVD.
///
/// Intended for desk-scale shapes (up to roughly 512x512). Fails with
/// [`LinalgError::SvdNoConvergence`] if the rotation sweep cap is exhausted.
pub fn svd(a: &Matrix) -> Result<SvdResult, LinalgError> {
    check_finite(&a.data)?;
    if a.rows >= a.cols {
        svd_tall(a)
    } else {
        let r = svd_tall(&a.transpose())?;
        Ok(SvdResult {
            u: r.v,
            s: r.s,
            v: r.u,
        })
    }
}

// One-sided Jacobi on a tall (m >= n) matrix: orthogonalize columns of a
// working copy against each other; converged columns are u_j * s_j and the
// accumulated rotations form v.
fn svd_tall(a: &Matrix) -> Result<SvdResult, LinalgError> {
    let (m, n) = (a.rows, a.cols);
    debug_assert!(m >= n);
    let mut u = a.clone();
    let mut v = Matrix::identity(n);

    // Columns below this norm are numerically zero: their direction is
    // rounding noise and rotating against them never satisfies the relative
    // criterion on rank-deficient inputs.
    let zero_floor = a.frobenius_norm() * 1e-14;
    let floor_sq = zero_floor * zero_floor;

    let mut converged = false;
    for _sweep in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n.saturating_sub(1) {
            for j in (i + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for r in 0..m {
                    let ui = u.get(r, i);
                    let uj = u.get(r, j);
                    alpha += ui * ui;
                    beta += uj * uj;
                    gamma += ui * uj;
                }
                if alpha <= floor_sq || beta <= floor_sq {
                    continue;
                }
                if gamma.abs() <= SVD_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let ui = u.get(r, i);
                    let uj = u.get(r, j);
                    u.set(r, i, c * ui - s * uj);
                    u.set(r, j, s * ui + c * uj);
                }
                for r in 0..n {
                    let vi = v.get(r, i);
                    let vj = v.get(r, j);
                    v.set(r, i, c * vi - s * vj);
                    v.set(r, j, s * vi + c * vj);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::SvdNoConvergence {
            max_sweeps: SVD_MAX_SWEEPS,
        });
    }

    let mut sigma: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|r| u.get(r, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());

    let mut u_sorted = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    let mut s_sorted = vec![0.0; n];
    for (dst, &src) in order.iter().enumerate() {
        s_sorted[dst] = sigma[src];
        for r in 0..m {
            u_sorted.set(r, dst, u.get(r, src));
        }
        for r in 0..n {
            v_sorted.set(r, dst, v.get(r, src));
        }
    }
    sigma = s_sorted;

    // Normalize nonzero columns; complete zero-sigma columns to an
    // orthonormal set so the orthonormality invariant holds at any rank.
    for j in 0..n {
        if sigma[j] > zero_floor {
            for r in 0..m {
                let val = u_sorted.get(r, j) / sigma[j];
                u_sorted.set(r, j, val);
            }
        } else {
            sigma[j] = 0.0;
            complete_column(&mut u_sorted, j);
        }
    }

    Ok(SvdResult {
        u: u_sorted,
        s: Vector { data: sigma },
        v: v_sorted,
    })
}

// Replace column j with a unit vector orthogonal to columns 0..j, chosen
// deterministically from the standard basis.
fn complete_column(u: &mut Matrix, j: usize) {
    let m = u.rows();
    for candidate in 0..m {
        let mut col: Vec<f64> = vec![0.0; m];
        col[candidate] = 1.0;
        for prev in 0..j {
            let proj: f64 = (0..m).map(|r| col[r] * u.get(r, prev)).sum();
            for (r, cr) in col.iter_mut().enumerate() {
                *cr -= proj * u.get(r, prev);
            }
        }
        let norm = col.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            for (r, cr) in col.iter().enumerate() {
                u.set(r, j, cr / norm);
            }
            return;
        }
    }
    // Unreachable for j < m: the basis spans the space.
    for r in 0..m {
        u.set(r, j, 0.0);
    }
}

/// Power-iteration estimate of the largest singular value.
///
/// Starts from a seeded unit-Gaussian vector and applies the two-sided update
/// `v <- normalize(A^T A v)`. The returned Rayleigh estimate is monotone
/// nondecreasing in `iters` for a fixed seed. Returns 0 for the zero matrix.
pub fn spectral_norm_power(a: &Matrix, iters: usize, seed: u64) -> f64 {
    assert!(iters >= 1, "spectral_norm_power requires iters >= 1");
    if a.max_abs() == 0.0 {
        return 0.0;
    }
    let mut rng = seeded_rng(seed);
    let mut v = Vector {
        data: (0..a.cols()).map(|_| standard_normal(&mut rng)).collect(),
    };
    let norm = v.norm2();
    if norm == 0.0 {
        return 0.0;
    }
    v = v.scale(1.0 / norm);
    for _ in 0..iters {
        let av = a.mat_vec(&v).expect("shape fixed by construction");
        let atav = a.mat_vec_transposed(&av).expect("shape fixed by construction");
        let norm = atav.norm2();
        if norm == 0.0 {
            // v landed in the null space; the Rayleigh estimate below is 0.
            break;
        }
        v = atav.scale(1.0 / norm);
    }
    a.mat_vec(&v).expect("shape fixed by construction").norm2()
}

/// Deterministic RNG used across the workspace: ChaCha8 keyed by a `u64`.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One standard-normal draw.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Gaussian vector of length `n`.
pub fn gaussian_vector<R: Rng>(rng: &mut R, n: usize) -> Vector {
    Vector {
        data: (0..n).map(|_| standard_normal(rng)).collect(),
    }
}

/// Gaussian matrix of shape `rows x cols`, filled in row-major order.
pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix {
        data: (0..rows * cols).map(|_| standard_normal(rng)).collect(),
        rows,
        cols,
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn check_finite(data: &[f64]) -> Result<(), LinalgError> {
    for (index, &value) in data.iter().enumerate() {
        if !value.is_finite() {
            return Err(LinalgError::NonFinite { index, value });
        }
    }
    Ok(())
}
