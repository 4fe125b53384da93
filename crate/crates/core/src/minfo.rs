//! Matrix-based Rényi entropy and mutual information over Gram kernels,
//! with analytic gradients for the quadratic order, and the empirical
//! estimators for the encoder-feature information bounds.
//!
//! For a unit-diagonal PSD kernel `A` of side `n`:
//!
//! ```text
//! H_a(A) = 1/(1-a) * ln tr((A/n)^a)          (a != 1)
//! H_1(A) = -tr((A/n) ln (A/n))               (von Neumann limit)
//! I_a(A;B) = H_a(A) + H_a(B) - H_a(A o B)    (o = Hadamard product)
//! ```
//!
//! The default order is `a = 2`, where `tr((A/n)^2)` is just the squared
//! Frobenius norm over `n^2` — no eigendecomposition needed, which is what
//! makes the quantity usable inside a training loop.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use libm::{log, pow};
use thiserror::Error;

use crate::tensor::{gram, hadamard, row_normalize, sym_eigvals, DenseMatrix, GramKernel, TensorError};

/// Eigenvalues in `[-EIG_CLAMP_TOL, 0)` are rounding artifacts of an exactly
/// PSD kernel and are clamped to zero; anything lower is a real defect.
const EIG_CLAMP_TOL: f64 = 1e-9;

/// The Jacobi solver resolves eigenvalues to about 1e-11 of the matrix
/// scale; spectrum mass below that is dust, and for orders below 1 the
/// fractional power would amplify it. Snapped to exact zero.
const EIG_SNAP_REL: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InfoError {
    #[error("entropy order must be a positive finite real, got {alpha}")]
    BadOrder { alpha: f64 },
    #[error("kernel eigenvalue {lambda} is below the PSD tolerance")]
    InvalidKernel { lambda: f64 },
    #[error("surrogate term is not finite")]
    NonFiniteInput,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Order of the Rényi entropy. `alpha = 1` routes to the von Neumann
/// formula, any other positive value to the Rényi formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyOrder {
    alpha: f64,
}

impl EntropyOrder {
    pub fn new(alpha: f64) -> Result<Self, InfoError> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(InfoError::BadOrder { alpha });
        }
        Ok(Self { alpha })
    }

    /// The production default, `alpha = 2`.
    pub const fn quadratic() -> Self {
        Self { alpha: 2.0 }
    }

    pub fn alpha(self) -> f64 {
        self.alpha
    }
}

impl Default for EntropyOrder {
    fn default() -> Self {
        Self::quadratic()
    }
}

/// `H_a(G)` in nats. Lies in `[0, ln n]` up to rounding.
pub fn matrix_entropy(g: &GramKernel, order: EntropyOrder) -> Result<f64, InfoError> {
    let n = g.n();
    if n == 0 {
        return Ok(0.0);
    }
    let nf = n as f64;
    if order.alpha == 2.0 {
        // tr((G/n)^2) = ||G||_F^2 / n^2, no eigendecomposition.
        return Ok(-log(g.sum_sq() / (nf * nf)));
    }

    let eigs = sym_eigvals(g.entries())?;
    let mut scaled = Vec::with_capacity(n);
    for lambda in eigs {
        if lambda < -EIG_CLAMP_TOL {
            return Err(InfoError::InvalidKernel { lambda });
        }
        let q = lambda / nf;
        scaled.push(if q < EIG_SNAP_REL { 0.0 } else { q });
    }

    if order.alpha == 1.0 {
        let mut h = 0.0;
        for q in scaled {
            if q > 0.0 {
                h -= q * log(q);
            }
        }
        Ok(h)
    } else {
        let sum: f64 = scaled.iter().map(|&q| pow(q, order.alpha)).sum();
        Ok(log(sum) / (1.0 - order.alpha))
    }
}

/// `I_a(A;B) = H_a(A) + H_a(B) - H_a(A o B)`.
///
/// Reported raw: the surrogate is not a true mutual information and small
/// negative values carry signal, so no clamping.
pub fn matrix_mi(a: &GramKernel, b: &GramKernel, order: EntropyOrder) -> Result<f64, InfoError> {
    let prod = hadamard(a, b)?;
    Ok(matrix_entropy(a, order)? + matrix_entropy(b, order)? - matrix_entropy(&prod, order)?)
}

/// Gradient of `H_2(gram(normalize_rows(Z)))` with respect to the raw
/// feature matrix `Z`, including the row-normalization chain rule.
pub fn matrix_entropy_grad_alpha2(z: &DenseMatrix) -> Result<DenseMatrix, InfoError> {
    let z_hat = row_normalize(z)?;
    let g = gram(&z_hat)?;
    let grad_hat = grad_h2_wrt_normalized(&z_hat, g.entries(), None);
    Ok(chain_through_row_normalization(z, &z_hat, &grad_hat))
}

/// Gradients of `I_2(gram(Z1), gram(Z2))` with respect to both raw feature
/// matrices.
pub fn matrix_mi_grad_alpha2(
    z1: &DenseMatrix,
    z2: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix), InfoError> {
    if z1.rows() != z2.rows() {
        return Err(InfoError::Tensor(TensorError::DimMismatch {
            lhs_rows: z1.rows(),
            lhs_cols: z1.cols(),
            rhs_rows: z2.rows(),
            rhs_cols: z2.cols(),
        }));
    }
    let z1_hat = row_normalize(z1)?;
    let z2_hat = row_normalize(z2)?;
    let g1 = gram(&z1_hat)?;
    let g2 = gram(&z2_hat)?;

    // d/dz1 [H2(G1) - H2(G1 o G2)]; the H2(G2) term is constant in z1.
    let grad1_hat = {
        let own = grad_h2_wrt_normalized(&z1_hat, g1.entries(), None);
        let cross = grad_h2_wrt_normalized(&z1_hat, g1.entries(), Some(g2.entries()));
        own.sub(&cross).expect("same shape")
    };
    let grad2_hat = {
        let own = grad_h2_wrt_normalized(&z2_hat, g2.entries(), None);
        let cross = grad_h2_wrt_normalized(&z2_hat, g2.entries(), Some(g1.entries()));
        own.sub(&cross).expect("same shape")
    };

    Ok((
        chain_through_row_normalization(z1, &z1_hat, &grad1_hat),
        chain_through_row_normalization(z2, &z2_hat, &grad2_hat),
    ))
}

/// Gradient of `H_2(G o K)` with respect to the normalized rows generating
/// `G`, where `K` is held constant (`None` means the all-ones kernel, i.e.
/// plain `H_2(G)`).
///
/// With `S = sum_ij (G_ij K_ij)^2` the derivative is
/// `dH2/dz_hat_k = -(4/S) * [((G o K o K) Zhat)_k - z_hat_k]`,
/// the subtracted row removing the constant unit diagonal's contribution.
fn grad_h2_wrt_normalized(
    z_hat: &DenseMatrix,
    g: &DenseMatrix,
    weight: Option<&DenseMatrix>,
) -> DenseMatrix {
    let n = z_hat.rows();
    let d = z_hat.cols();

    let mut s = 0.0;
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let k_ij = weight.map_or(1.0, |w| w.get(i, j));
            let gk = g.get(i, j) * k_ij;
            s += gk * gk;
            m.set(i, j, gk * k_ij);
        }
    }

    let mut out = DenseMatrix::zeros(n, d);
    let coef = -4.0 / s;
    for k in 0..n {
        for c in 0..d {
            let mut acc = 0.0;
            for j in 0..n {
                acc += m.get(k, j) * z_hat.get(j, c);
            }
            out.set(k, c, coef * (acc - z_hat.get(k, c)));
        }
    }
    out
}

/// Pull a gradient with respect to normalized rows back to the raw rows:
/// per row, project out the radial component and divide by the row norm.
fn chain_through_row_normalization(
    z: &DenseMatrix,
    z_hat: &DenseMatrix,
    grad_hat: &DenseMatrix,
) -> DenseMatrix {
    let n = z.rows();
    let d = z.cols();
    let mut out = DenseMatrix::zeros(n, d);
    for r in 0..n {
        let raw = z.row(r);
        let unit = z_hat.row(r);
        let gh = grad_hat.row(r);
        let norm = libm::sqrt(raw.iter().map(|v| v * v).sum());
        let radial: f64 = gh.iter().zip(unit).map(|(a, b)| a * b).sum();
        for c in 0..d {
            out.set(r, c, (gh[c] - radial * unit[c]) / norm);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    Lower,
    Upper,
}

/// Empirical bound estimate assembled from batch features. `value` is in
/// nats modulo an additive constant (the unestimated `I(R;Y)` term), so
/// estimates are only comparable within one training run.
#[derive(Debug, Clone)]
pub struct BoundEstimate {
    pub kind: BoundKind,
    pub value: f64,
    pub terms: BTreeMap<&'static str, f64>,
    /// The exact bound carries an `I(R;Y)` term no surrogate estimates.
    pub constant_omitted: bool,
}

/// Lower-bound estimate: `-L_enc - I_2(Z1 Z1^T; Z2 Z2^T)`, where the
/// negated encoder-feature contrastive loss stands in for `I(Z1;R)`.
pub fn estimate_lower_bound(
    z1_batch: &DenseMatrix,
    z2_batch: &DenseMatrix,
    encoder_contrastive_loss: f64,
) -> Result<BoundEstimate, InfoError> {
    if !encoder_contrastive_loss.is_finite() {
        return Err(InfoError::NonFiniteInput);
    }
    let i_z1_z2 = normalized_mi2(z1_batch, z2_batch)?;
    let i_z1_r_surrogate = -encoder_contrastive_loss;
    let mut terms = BTreeMap::new();
    terms.insert("i_z1_r_surrogate", i_z1_r_surrogate);
    terms.insert("i_z1_z2", i_z1_z2);
    Ok(BoundEstimate {
        kind: BoundKind::Lower,
        value: i_z1_r_surrogate - i_z1_z2,
        terms,
        constant_omitted: true,
    })
}

/// Upper-bound estimate: `S_yz2 - I_2(Z1 Z1^T; Z2 Z2^T) + H_2(Z1 Z1^T)`,
/// with `S_yz2` an externally supplied `I(Y;Z2)` surrogate (negated online
/// classifier cross-entropy in the training harness).
pub fn estimate_upper_bound(
    z1_batch: &DenseMatrix,
    z2_batch: &DenseMatrix,
    i_y_z2_surrogate: f64,
) -> Result<BoundEstimate, InfoError> {
    if !i_y_z2_surrogate.is_finite() {
        return Err(InfoError::NonFiniteInput);
    }
    let i_z1_z2 = normalized_mi2(z1_batch, z2_batch)?;
    let h_z1 = matrix_entropy(&gram(&row_normalize(z1_batch)?)?, EntropyOrder::quadratic())?;
    let mut terms = BTreeMap::new();
    terms.insert("i_y_z2_surrogate", i_y_z2_surrogate);
    terms.insert("i_z1_z2", i_z1_z2);
    terms.insert("h_z1", h_z1);
    Ok(BoundEstimate {
        kind: BoundKind::Upper,
        value: i_y_z2_surrogate - i_z1_z2 + h_z1,
        terms,
        constant_omitted: true,
    })
}

/// `I_2` between the Gram kernels of two raw feature batches.
pub fn normalized_mi2(z1: &DenseMatrix, z2: &DenseMatrix) -> Result<f64, InfoError> {
    let g1 = gram(&row_normalize(z1)?)?;
    let g2 = gram(&row_normalize(z2)?)?;
    matrix_mi(&g1, &g2, EntropyOrder::quadratic())
}
