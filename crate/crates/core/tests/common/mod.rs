//! Shared helpers for the numeric test suites.

use projinfo_core::DenseMatrix;

/// Central finite-difference gradient of a scalar function over every entry
/// of `x`.
pub fn fd_grad(mut f: impl FnMut(&DenseMatrix) -> f64, x: &DenseMatrix, h: f64) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let mut plus = x.clone();
            plus.set(r, c, x.get(r, c) + h);
            let mut minus = x.clone();
            minus.set(r, c, x.get(r, c) - h);
            out.set(r, c, (f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    out
}

/// Frobenius-relative disagreement between an analytic gradient and its
/// finite-difference estimate.
pub fn rel_err(analytic: &DenseMatrix, fd: &DenseMatrix) -> f64 {
    assert_eq!(analytic.rows(), fd.rows());
    assert_eq!(analytic.cols(), fd.cols());
    let mut diff = 0.0;
    let mut scale = 0.0;
    for (a, b) in analytic.data().iter().zip(fd.data()) {
        diff += (a - b) * (a - b);
        scale += b * b;
    }
    diff.sqrt() / scale.sqrt().max(1e-8)
}

pub fn assert_grad_close(analytic: &DenseMatrix, fd: &DenseMatrix, tol: f64, what: &str) {
    let err = rel_err(analytic, fd);
    assert!(err <= tol, "{what}: finite-difference mismatch, rel err {err:.3e}");
}
