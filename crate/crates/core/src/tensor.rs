//! Dense real linear algebra: row-major matrices, Gram kernels with checked
//! invariants, and a cyclic Jacobi eigensolver for symmetric matrices.

use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;
use thiserror::Error;

/// Largest side accepted by the symmetric eigensolver.
pub const EIG_MAX_SIDE: usize = 4096;

const JACOBI_MAX_SWEEPS: usize = 50;
const JACOBI_REL_TOL: f64 = 1e-11;
const ROW_NORM_FLOOR: f64 = 1e-30;
const UNIT_ROW_TOL: f64 = 1e-9;
const KERNEL_SYM_TOL: f64 = 1e-12;
const KERNEL_DIAG_TOL: f64 = 1e-12;
const KERNEL_PSD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("data length {got} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("row {row} has near-zero norm and cannot be normalized")]
    ZeroRow { row: usize },
    #[error("row {row} has norm {norm}, expected unit")]
    NotNormalized { row: usize, norm: f64 },
    #[error("dimension mismatch: {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    DimMismatch {
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("diagonal entry {idx} is {got}, expected 1 within {tol}")]
    BadDiagonal { idx: usize, got: f64, tol: f64 },
    #[error("matrix is not positive semidefinite (eigenvalue {lambda_min} below -{tol})")]
    NotPsd { lambda_min: f64, tol: f64 },
    #[error("Jacobi sweeps did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("matrix side {n} exceeds the eigensolver cap {cap}")]
    TooLarge { n: usize, cap: usize },
}

/// Row-major matrix of finite 64-bit reals.
///
/// Constructors reject NaN/Inf entries; arithmetic that could overflow
/// re-checks its output, so a `DenseMatrix` in hand is always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        let m = Self { rows, cols, data };
        m.ensure_finite()?;
        Ok(m)
    }

    /// Build from a closure over (row, col). The closure must produce finite
    /// values; the result is checked.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, TensorError> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
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

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        if self.cols != other.rows {
            return Err(self.dim_mismatch(other));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(r);
                for c in 0..other.cols {
                    out_row[c] += a * orow[c];
                }
            }
        }
        out.ensure_finite()?;
        Ok(out)
    }

    /// `self * other^T`; both operands indexed by rows, the common layout in
    /// similarity computations.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self, TensorError> {
        if self.cols != other.cols {
            return Err(self.dim_mismatch(other));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let arow = self.row(r);
            for c in 0..other.rows {
                let brow = other.row(c);
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += arow[k] * brow[k];
                }
                out.set(r, c, acc);
            }
        }
        out.ensure_finite()?;
        Ok(out)
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self, TensorError> {
        if self.rows != other.rows {
            return Err(self.dim_mismatch(other));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for r in 0..self.cols {
                let a = arow[r];
                if a == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(r);
                for c in 0..other.cols {
                    out_row[c] += a * brow[c];
                }
            }
        }
        out.ensure_finite()?;
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scaled(&self, c: f64) -> Result<Self, TensorError> {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= c;
        }
        out.ensure_finite()?;
        Ok(out)
    }

    /// `self += c * other`, the optimizer update kernel.
    pub fn add_scaled_assign(&mut self, c: f64, other: &Self) -> Result<(), TensorError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(self.dim_mismatch(other));
        }
        for (v, o) in self.data.iter_mut().zip(other.data.iter()) {
            *v += c * o;
        }
        self.ensure_finite()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn frobenius_norm(&self) -> f64 {
        sqrt(self.data.iter().map(|v| v * v).sum())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, TensorError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(self.dim_mismatch(other));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_vec(self.rows, self.cols, data)
    }

    fn dim_mismatch(&self, other: &Self) -> TensorError {
        TensorError::DimMismatch {
            lhs_rows: self.rows,
            lhs_cols: self.cols,
            rhs_rows: other.rows,
            rhs_cols: other.cols,
        }
    }

    fn ensure_finite(&self) -> Result<(), TensorError> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    row: i / self.cols.max(1),
                    col: i % self.cols.max(1),
                });
            }
        }
        Ok(())
    }
}

/// Symmetric positive-semidefinite matrix with unit diagonal, the carrier
/// for matrix-based entropy. Obtained from [`gram`] or [`hadamard`], or
/// validated from raw entries via [`GramKernel::try_new`].
#[derive(Debug, Clone, PartialEq)]
pub struct GramKernel {
    entries: DenseMatrix,
}

impl GramKernel {
    /// Validate raw entries: unit diagonal within 1e-12, symmetry within
    /// 1e-12, and smallest eigenvalue >= -1e-9.
    pub fn try_new(entries: DenseMatrix) -> Result<Self, TensorError> {
        if entries.rows() != entries.cols() {
            return Err(TensorError::NotSquare {
                rows: entries.rows(),
                cols: entries.cols(),
            });
        }
        let n = entries.rows();
        for i in 0..n {
            let d = entries.get(i, i);
            if (d - 1.0).abs() > KERNEL_DIAG_TOL {
                return Err(TensorError::BadDiagonal {
                    idx: i,
                    got: d,
                    tol: KERNEL_DIAG_TOL,
                });
            }
            for j in (i + 1)..n {
                if (entries.get(i, j) - entries.get(j, i)).abs() > KERNEL_SYM_TOL {
                    return Err(TensorError::NotSymmetric { row: i, col: j });
                }
            }
        }
        check_psd(&entries, KERNEL_PSD_TOL)?;
        Ok(Self { entries })
    }

    pub fn n(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &DenseMatrix {
        &self.entries
    }

    /// Sum of squared entries, i.e. `tr(G^2)` for a symmetric G.
    pub fn sum_sq(&self) -> f64 {
        self.entries.data().iter().map(|v| v * v).sum()
    }

    pub(crate) fn from_parts_unchecked(entries: DenseMatrix) -> Self {
        Self { entries }
    }
}

/// Rescale every row of `m` to unit L2 norm.
pub fn row_normalize(m: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let norm = row_norm(m.row(r));
        if norm < ROW_NORM_FLOOR {
            return Err(TensorError::ZeroRow { row: r });
        }
        let inv = 1.0 / norm;
        for v in out.row_mut(r) {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Gram kernel `Z Z^T` of a matrix with unit-norm rows. The diagonal is
/// re-pinned to exactly 1 to absorb dot-product rounding.
pub fn gram(z_normalized: &DenseMatrix) -> Result<GramKernel, TensorError> {
    for r in 0..z_normalized.rows() {
        let norm = row_norm(z_normalized.row(r));
        if (norm - 1.0).abs() > UNIT_ROW_TOL {
            return Err(TensorError::NotNormalized { row: r, norm });
        }
    }
    let mut entries = z_normalized.matmul_nt(z_normalized)?;
    for i in 0..entries.rows() {
        entries.set(i, i, 1.0);
    }
    Ok(GramKernel::from_parts_unchecked(entries))
}

/// Entrywise (Hadamard) product of two kernels. Unit diagonal is preserved
/// exactly and positive semidefiniteness follows from the Schur product
/// theorem; the result is still certified to `lambda_min >= -1e-9`.
pub fn hadamard(a: &GramKernel, b: &GramKernel) -> Result<GramKernel, TensorError> {
    if a.n() != b.n() {
        return Err(TensorError::DimMismatch {
            lhs_rows: a.n(),
            lhs_cols: a.n(),
            rhs_rows: b.n(),
            rhs_cols: b.n(),
        });
    }
    let entries = a.entries().zip_with(b.entries(), |x, y| x * y)?;
    check_psd(&entries, KERNEL_PSD_TOL)?;
    Ok(GramKernel::from_parts_unchecked(entries))
}

/// Eigenvalues of a symmetric matrix in ascending order, via cyclic Jacobi
/// rotations with a fixed sweep budget.
pub fn sym_eigvals(a: &DenseMatrix) -> Result<Vec<f64>, TensorError> {
    if a.rows() != a.cols() {
        return Err(TensorError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    if n > EIG_MAX_SIDE {
        return Err(TensorError::TooLarge {
            n,
            cap: EIG_MAX_SIDE,
        });
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (a.get(i, j) - a.get(j, i)).abs() > 1e-9 {
                return Err(TensorError::NotSymmetric { row: i, col: j });
            }
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    let mut w: Vec<f64> = a.data().to_vec();
    // Symmetrize exactly so the rotations see a_ij == a_ji.
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (w[i * n + j] + w[j * n + i]);
            w[i * n + j] = m;
            w[j * n + i] = m;
        }
    }

    let fro_initial = sqrt(w.iter().map(|v| v * v).sum());
    if fro_initial == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let target = JACOBI_REL_TOL * fro_initial;

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diag_norm(&w, n) <= target {
            let mut eig: Vec<f64> = (0..n).map(|i| w[i * n + i]).collect();
            eig.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
            return Ok(eig);
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                rotate(&mut w, n, p, q);
            }
        }
    }
    if off_diag_norm(&w, n) <= target {
        let mut eig: Vec<f64> = (0..n).map(|i| w[i * n + i]).collect();
        eig.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
        return Ok(eig);
    }
    Err(TensorError::NoConvergence {
        sweeps: JACOBI_MAX_SWEEPS,
    })
}

/// One Jacobi rotation annihilating w[p][q].
fn rotate(w: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = w[p * n + q];
    if apq == 0.0 {
        return;
    }
    let app = w[p * n + p];
    let aqq = w[q * n + q];
    let theta = 0.5 * (aqq - app) / apq;
    let t = if theta >= 0.0 {
        1.0 / (theta + sqrt(1.0 + theta * theta))
    } else {
        -1.0 / (-theta + sqrt(1.0 + theta * theta))
    };
    let c = 1.0 / sqrt(1.0 + t * t);
    let s = t * c;

    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = w[k * n + p];
        let akq = w[k * n + q];
        let new_p = c * akp - s * akq;
        let new_q = s * akp + c * akq;
        w[k * n + p] = new_p;
        w[p * n + k] = new_p;
        w[k * n + q] = new_q;
        w[q * n + k] = new_q;
    }
    w[p * n + p] = app - t * apq;
    w[q * n + q] = aqq + t * apq;
    w[p * n + q] = 0.0;
    w[q * n + p] = 0.0;
}

fn off_diag_norm(w: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = w[i * n + j];
            acc += v * v;
        }
    }
    sqrt(2.0 * acc)
}

fn row_norm(row: &[f64]) -> f64 {
    sqrt(row.iter().map(|v| v * v).sum())
}

/// Certify `lambda_min(m) >= -tol`.
///
/// Fast path: a Cholesky factorization of `m + tol*I` succeeding proves the
/// claim without an eigendecomposition. On breakdown (legitimately singular
/// kernels graze zero pivots) fall back to the exact eigenvalue check.
fn check_psd(m: &DenseMatrix, tol: f64) -> Result<(), TensorError> {
    if cholesky_succeeds(m, tol) {
        return Ok(());
    }
    let eig = sym_eigvals(m)?;
    let lambda_min = eig.first().copied().unwrap_or(0.0);
    if lambda_min >= -tol {
        Ok(())
    } else {
        Err(TensorError::NotPsd { lambda_min, tol })
    }
}

fn cholesky_succeeds(m: &DenseMatrix, shift: f64) -> bool {
    let n = m.rows();
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = m.get(i, j);
            if i == j {
                acc += shift;
            }
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if acc <= 0.0 || !acc.is_finite() {
                    return false;
                }
                l[i * n + i] = sqrt(acc);
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    true
}
