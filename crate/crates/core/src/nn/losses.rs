//! Contrastive objectives and the bottleneck-regularized total, each
//! returning its value together with exact gradients.
//!
//! Gradients here are hand-derived closed forms rather than tape replays:
//! every loss ends in a normalization (row-wise or per-dimension) followed
//! by a quadratic or softmax form, which collapses to a few matrix products.
//! The finite-difference suite audits all of them.

use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, log, sqrt};

use super::{LayerParams, LossBundle, NnError};
use crate::minfo::{matrix_mi_grad_alpha2, normalized_mi2};
use crate::tensor::DenseMatrix;

const ROW_GUARD: f64 = 1e-30;

/// Loss value with gradients for the two input feature matrices (raw,
/// pre-normalization).
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad_a: DenseMatrix,
    pub grad_b: DenseMatrix,
}

/// InfoNCE with in-batch negatives, symmetrized over the two views.
///
/// Rows are L2-normalized internally; similarities are divided by the
/// temperature. For anchor `i` the positive is row `i` of the other view
/// and the remaining `n - 1` rows of that view serve as negatives, so each
/// softmax runs over `n` candidates and the uniform-similarity loss is
/// exactly `ln n`.
pub fn infonce_loss(
    anchor: &DenseMatrix,
    positive: &DenseMatrix,
    temperature: f64,
) -> Result<LossGrad, NnError> {
    let (s, a_hat, b_hat, a_norms, b_norms) = infonce_similarities(anchor, positive, temperature)?;
    let n = anchor.rows();
    let nf = n as f64;

    let mut loss = 0.0;
    let mut g_s = DenseMatrix::zeros(n, n);
    // View A anchors: softmax over rows of S.
    for i in 0..n {
        let row = s.row(i);
        let lse = logsumexp(row);
        loss += lse - row[i];
        for j in 0..n {
            let v = g_s.get(i, j) + exp(row[j] - lse);
            g_s.set(i, j, v);
        }
        g_s.set(i, i, g_s.get(i, i) - 1.0);
    }
    // View B anchors: softmax over columns of S.
    let mut col = vec![0.0; n];
    for j in 0..n {
        for (i, c) in col.iter_mut().enumerate() {
            *c = s.get(i, j);
        }
        let lse = logsumexp(&col);
        loss += lse - col[j];
        for i in 0..n {
            g_s.set(i, j, g_s.get(i, j) + exp(col[i] - lse));
        }
        g_s.set(j, j, g_s.get(j, j) - 1.0);
    }

    let value = loss / (2.0 * nf);
    if !value.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    let g_s = g_s.scaled(1.0 / (2.0 * nf * temperature))?;
    let d_a_hat = g_s.matmul(&b_hat)?;
    let d_b_hat = g_s.matmul_tn(&a_hat)?;
    Ok(LossGrad {
        value,
        grad_a: chain_guarded_normalization(anchor, &a_hat, &a_norms, &d_a_hat),
        grad_b: chain_guarded_normalization(positive, &b_hat, &b_norms, &d_b_hat),
    })
}

/// Value-only InfoNCE, for surrogate logging where no gradient may flow.
pub fn infonce_value(
    anchor: &DenseMatrix,
    positive: &DenseMatrix,
    temperature: f64,
) -> Result<f64, NnError> {
    let (s, ..) = infonce_similarities(anchor, positive, temperature)?;
    let n = anchor.rows();
    let mut loss = 0.0;
    let mut col = vec![0.0; n];
    for i in 0..n {
        let row = s.row(i);
        loss += logsumexp(row) - row[i];
    }
    for j in 0..n {
        for (i, c) in col.iter_mut().enumerate() {
            *c = s.get(i, j);
        }
        loss += logsumexp(&col) - col[j];
    }
    let value = loss / (2.0 * n as f64);
    if !value.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    Ok(value)
}

type Similarities = (DenseMatrix, DenseMatrix, DenseMatrix, Vec<f64>, Vec<f64>);

fn infonce_similarities(
    anchor: &DenseMatrix,
    positive: &DenseMatrix,
    temperature: f64,
) -> Result<Similarities, NnError> {
    if anchor.rows() != positive.rows() || anchor.cols() != positive.cols() {
        return Err(NnError::Tensor(crate::tensor::TensorError::DimMismatch {
            lhs_rows: anchor.rows(),
            lhs_cols: anchor.cols(),
            rhs_rows: positive.rows(),
            rhs_cols: positive.cols(),
        }));
    }
    if anchor.rows() < 2 {
        return Err(NnError::BatchTooSmall {
            rows: anchor.rows(),
            min: 2,
        });
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(NnError::NonPositiveTemperature { temperature });
    }
    let (a_hat, a_norms) = normalize_rows_guarded(anchor);
    let (b_hat, b_norms) = normalize_rows_guarded(positive);
    let s = a_hat.matmul_nt(&b_hat)?.scaled(1.0 / temperature)?;
    Ok((s, a_hat, b_hat, a_norms, b_norms))
}

/// Barlow Twins redundancy-reduction loss.
///
/// `C_ij = sum_b zA_bi zB_bj / (||zA_:i|| ||zB_:j||)` per the batch-norm
/// convention, then `L = sum_i (1 - C_ii)^2 + gamma * sum_{i!=j} C_ij^2`.
pub fn barlow_loss(za: &DenseMatrix, zb: &DenseMatrix, gamma: f64) -> Result<LossGrad, NnError> {
    let (c, u_hat, v_hat, na, nb) = barlow_correlation(za, zb)?;
    let d = za.cols();

    let mut value = 0.0;
    let mut dc = DenseMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let cij = c.get(i, j);
            if i == j {
                value += (1.0 - cij) * (1.0 - cij);
                dc.set(i, j, -2.0 * (1.0 - cij));
            } else {
                value += gamma * cij * cij;
                dc.set(i, j, 2.0 * gamma * cij);
            }
        }
    }
    if !value.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }

    // dC_ij/dzA_bi = (vhat_bj - C_ij uhat_bi) / na_i and symmetrically for zB.
    let mut s_row = vec![0.0; d];
    let mut t_col = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            let w = dc.get(i, j) * c.get(i, j);
            s_row[i] += w;
            t_col[j] += w;
        }
    }
    let m1 = v_hat.matmul_nt(&dc)?; // sum_j dC_ij * vhat_bj
    let m2 = u_hat.matmul(&dc)?; // sum_i dC_ij * uhat_bi

    let n = za.rows();
    let mut grad_a = DenseMatrix::zeros(n, d);
    let mut grad_b = DenseMatrix::zeros(n, d);
    for b in 0..n {
        for i in 0..d {
            grad_a.set(b, i, (m1.get(b, i) - s_row[i] * u_hat.get(b, i)) / na[i]);
            grad_b.set(b, i, (m2.get(b, i) - t_col[i] * v_hat.get(b, i)) / nb[i]);
        }
    }
    Ok(LossGrad {
        value,
        grad_a,
        grad_b,
    })
}

pub fn barlow_value(za: &DenseMatrix, zb: &DenseMatrix, gamma: f64) -> Result<f64, NnError> {
    let (c, ..) = barlow_correlation(za, zb)?;
    let d = za.cols();
    let mut value = 0.0;
    for i in 0..d {
        for j in 0..d {
            let cij = c.get(i, j);
            if i == j {
                value += (1.0 - cij) * (1.0 - cij);
            } else {
                value += gamma * cij * cij;
            }
        }
    }
    if !value.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    Ok(value)
}

type Correlation = (DenseMatrix, DenseMatrix, DenseMatrix, Vec<f64>, Vec<f64>);

fn barlow_correlation(za: &DenseMatrix, zb: &DenseMatrix) -> Result<Correlation, NnError> {
    if za.rows() != zb.rows() || za.cols() != zb.cols() {
        return Err(NnError::Tensor(crate::tensor::TensorError::DimMismatch {
            lhs_rows: za.rows(),
            lhs_cols: za.cols(),
            rhs_rows: zb.rows(),
            rhs_cols: zb.cols(),
        }));
    }
    if za.rows() < 2 {
        return Err(NnError::BatchTooSmall {
            rows: za.rows(),
            min: 2,
        });
    }
    let na = column_norms(za)?;
    let nb = column_norms(zb)?;
    let u_hat = scale_columns(za, &na);
    let v_hat = scale_columns(zb, &nb);
    let c = u_hat.matmul_tn(&v_hat)?;
    Ok((c, u_hat, v_hat, na, nb))
}

fn column_norms(m: &DenseMatrix) -> Result<Vec<f64>, NnError> {
    let mut norms = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, v) in norms.iter_mut().zip(m.row(r)) {
            *acc += v * v;
        }
    }
    for (dim, n) in norms.iter_mut().enumerate() {
        *n = sqrt(*n);
        if *n < ROW_GUARD {
            return Err(NnError::ZeroVariance { dim });
        }
    }
    Ok(norms)
}

fn scale_columns(m: &DenseMatrix, norms: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) / norms[c])
        .expect("scaling finite columns by nonzero norms")
}

/// Mean cross-entropy of a linear head on (detached or live) features.
#[derive(Debug, Clone)]
pub struct HeadLossGrad {
    pub value: f64,
    pub grad_features: DenseMatrix,
    pub grad_weight: DenseMatrix,
    pub grad_bias: DenseMatrix,
    /// Fraction of rows whose argmax logit hits the label.
    pub accuracy: f64,
}

pub fn supervised_head_loss(
    features: &DenseMatrix,
    labels: &[usize],
    head: &LayerParams,
) -> Result<HeadLossGrad, NnError> {
    let n = features.rows();
    if labels.len() != n {
        return Err(NnError::LabelCount {
            labels: labels.len(),
            rows: n,
        });
    }
    let classes = head.weight.cols();
    for &label in labels {
        if label >= classes {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
    }

    let mut logits = features.matmul(&head.weight)?;
    let bias = head.bias.row(0);
    for r in 0..n {
        for (v, b) in logits.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }

    let nf = n as f64;
    let mut value = 0.0;
    let mut hits = 0usize;
    let mut d_logits = DenseMatrix::zeros(n, classes);
    for r in 0..n {
        let row = logits.row(r);
        let lse = logsumexp(row);
        value += lse - row[labels[r]];
        let mut best = 0;
        for c in 0..classes {
            if row[c] > row[best] {
                best = c;
            }
            d_logits.set(r, c, exp(row[c] - lse) / nf);
        }
        d_logits.set(r, labels[r], d_logits.get(r, labels[r]) - 1.0 / nf);
        if best == labels[r] {
            hits += 1;
        }
    }
    value /= nf;
    if !value.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }

    Ok(HeadLossGrad {
        value,
        grad_features: d_logits.matmul_nt(&head.weight)?,
        grad_weight: features.matmul_tn(&d_logits)?,
        grad_bias: {
            let mut b = DenseMatrix::zeros(1, classes);
            for r in 0..n {
                for (acc, v) in b.row_mut(0).iter_mut().zip(d_logits.row(r)) {
                    *acc += v;
                }
            }
            b
        },
        accuracy: hits as f64 / nf,
    })
}

/// Total loss with the bottleneck regularizer folded in, plus the gradients
/// it adds on the anchor-view features.
#[derive(Debug, Clone)]
pub struct RegularizedLoss {
    pub bundle: LossBundle,
    /// Base objective gradient plus `lambda` times the regularizer part.
    pub grad_z2_anchor: DenseMatrix,
    /// Base objective gradient for the positive view (regularizer-free).
    pub grad_z2_positive: DenseMatrix,
    /// `lambda` times the regularizer gradient on the encoder features.
    pub grad_z1_anchor: DenseMatrix,
}

/// Combine a contrastive objective with `lambda * I_2(Z1 Z1^T; Z2 Z2^T)`
/// computed on the anchor view. With `lambda = 0` the output is bit-exactly
/// the base objective and no kernel work happens.
pub fn bottleneck_regularized_loss(
    z1_anchor: &DenseMatrix,
    z2_anchor: &DenseMatrix,
    base: LossGrad,
    encoder_feature_objective: f64,
    lambda: f64,
) -> Result<RegularizedLoss, NnError> {
    if lambda == 0.0 {
        let bundle = LossBundle {
            objective: base.value,
            regularizer: 0.0,
            total: base.value,
            encoder_feature_objective,
        };
        let grad_z1_anchor = DenseMatrix::zeros(z1_anchor.rows(), z1_anchor.cols());
        return Ok(RegularizedLoss {
            bundle,
            grad_z2_anchor: base.grad_a,
            grad_z2_positive: base.grad_b,
            grad_z1_anchor,
        });
    }

    let (z1_clean, z1_degenerate) = sanitize_rows(z1_anchor);
    let (z2_clean, z2_degenerate) = sanitize_rows(z2_anchor);
    let regularizer = normalized_mi2(&z1_clean, &z2_clean)?;
    let (mut g_z1, mut g_z2) = matrix_mi_grad_alpha2(&z1_clean, &z2_clean)?;
    zero_degenerate_rows(&mut g_z1, &z1_degenerate);
    zero_degenerate_rows(&mut g_z2, &z2_degenerate);

    let total = base.value + lambda * regularizer;
    if !total.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    let mut grad_z2_anchor = base.grad_a;
    grad_z2_anchor.add_scaled_assign(lambda, &g_z2)?;
    Ok(RegularizedLoss {
        bundle: LossBundle {
            objective: base.value,
            regularizer,
            total,
            encoder_feature_objective,
        },
        grad_z2_anchor,
        grad_z2_positive: base.grad_b,
        grad_z1_anchor: g_z1.scaled(lambda)?,
    })
}

/// Row-normalize with a guard: rows below the norm floor stay zero instead
/// of erroring. Gradients through guarded rows are zero.
pub(crate) fn normalize_rows_guarded(m: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = vec![0.0; m.rows()];
    for r in 0..m.rows() {
        let norm = sqrt(m.row(r).iter().map(|v| v * v).sum());
        if norm < ROW_GUARD {
            for v in out.row_mut(r) {
                *v = 0.0;
            }
        } else {
            norms[r] = norm;
            for v in out.row_mut(r) {
                *v /= norm;
            }
        }
    }
    (out, norms)
}

/// Kernel inputs cannot carry zero rows (the Gram diagonal must be 1), so
/// degenerate rows are swapped for a fixed basis vector. The substitute is
/// constant, hence contributes zero gradient.
pub(crate) fn sanitize_rows(m: &DenseMatrix) -> (DenseMatrix, Vec<bool>) {
    let mut out = m.clone();
    let mut degenerate = vec![false; m.rows()];
    for r in 0..m.rows() {
        let norm = sqrt(m.row(r).iter().map(|v| v * v).sum());
        if norm < ROW_GUARD {
            degenerate[r] = true;
            let row = out.row_mut(r);
            row.iter_mut().for_each(|v| *v = 0.0);
            row[0] = 1.0;
        }
    }
    (out, degenerate)
}

fn zero_degenerate_rows(g: &mut DenseMatrix, degenerate: &[bool]) {
    for (r, &dead) in degenerate.iter().enumerate() {
        if dead {
            g.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Project an upstream gradient on normalized rows back to the raw rows,
/// skipping rows the guard zeroed.
fn chain_guarded_normalization(
    raw: &DenseMatrix,
    unit: &DenseMatrix,
    norms: &[f64],
    grad_unit: &DenseMatrix,
) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(raw.rows(), raw.cols());
    for r in 0..raw.rows() {
        if norms[r] == 0.0 {
            continue;
        }
        let u = unit.row(r);
        let g = grad_unit.row(r);
        let radial: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
        for c in 0..raw.cols() {
            out.set(r, c, (g[c] - radial * u[c]) / norms[r]);
        }
    }
    out
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| exp(v - max)).sum();
    max + log(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn infonce_uniform_similarities_give_ln_n() {
        // Every row the same unit vector: all similarities coincide.
        let m = DenseMatrix::from_fn(5, 3, |_, c| if c == 0 { 2.0 } else { 0.0 }).unwrap();
        let out = infonce_loss(&m, &m, 0.2).unwrap();
        assert!((out.value - 5.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_orthogonal_pairs_hand_value() {
        // n=2, tau=1, pairs identical within and orthogonal across:
        // loss = ln(1 + e^{-1}).
        let a = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = infonce_loss(&a, &a, 1.0).unwrap();
        let expected = (1.0 + (-1.0_f64).exp()).ln();
        assert!((out.value - expected).abs() < 1e-12, "{}", out.value);
        assert!((out.value - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn infonce_rejects_tiny_batch_and_bad_temperature() {
        let a = DenseMatrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            infonce_loss(&a, &a, 0.2),
            Err(NnError::BatchTooSmall { .. })
        ));
        let b = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            infonce_loss(&b, &b, 0.0),
            Err(NnError::NonPositiveTemperature { .. })
        ));
    }

    #[test]
    fn infonce_value_matches_grad_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = gaussian_matrix(6, 4, 1.0, &mut rng);
        let b = gaussian_matrix(6, 4, 1.0, &mut rng);
        let full = infonce_loss(&a, &b, 0.2).unwrap();
        let value = infonce_value(&a, &b, 0.2).unwrap();
        assert_eq!(full.value, value);
    }

    #[test]
    fn barlow_whitened_identical_views_score_zero() {
        // Orthogonal columns make C exactly the identity.
        let z = DenseMatrix::from_vec(
            4,
            2,
            vec![1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0],
        )
        .unwrap();
        let out = barlow_loss(&z, &z, 0.005).unwrap();
        assert!(out.value.abs() < 1e-12);
    }

    #[test]
    fn barlow_anticorrelated_views_score_4d() {
        let z = DenseMatrix::from_vec(
            4,
            2,
            vec![1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0],
        )
        .unwrap();
        let neg = z.scaled(-1.0).unwrap();
        let out = barlow_loss(&z, &neg, 0.005).unwrap();
        assert!((out.value - 4.0 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn barlow_rejects_zero_norm_dimension() {
        let z = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        assert!(matches!(
            barlow_loss(&z, &z, 0.005),
            Err(NnError::ZeroVariance { dim: 1 })
        ));
    }

    #[test]
    fn head_loss_equal_logits_is_ln_c() {
        let head = LayerParams::zeros(3, 4);
        let features = DenseMatrix::from_vec(2, 3, vec![0.5; 6]).unwrap();
        let out = supervised_head_loss(&features, &[1, 3], &head).unwrap();
        assert!((out.value - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn head_loss_saturates_to_zero_with_large_margin() {
        let mut head = LayerParams::zeros(2, 2);
        head.weight = DenseMatrix::from_vec(2, 2, vec![50.0, -50.0, -50.0, 50.0]).unwrap();
        let features = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = supervised_head_loss(&features, &[0, 1], &head).unwrap();
        assert!(out.value < 1e-12);
        assert_eq!(out.accuracy, 1.0);
    }

    #[test]
    fn head_loss_rejects_bad_labels() {
        let head = LayerParams::zeros(2, 3);
        let features = DenseMatrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            supervised_head_loss(&features, &[3], &head),
            Err(NnError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn lambda_zero_is_bit_exact_base_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z1 = gaussian_matrix(5, 4, 1.0, &mut rng);
        let z2 = gaussian_matrix(5, 3, 1.0, &mut rng);
        let base = infonce_loss(&z2, &z2, 0.2).unwrap();
        let reg =
            bottleneck_regularized_loss(&z1, &z2, base.clone(), 0.1, 0.0).unwrap();
        assert_eq!(reg.bundle.total, base.value);
        assert_eq!(reg.bundle.objective, base.value);
        assert_eq!(reg.bundle.regularizer, 0.0);
        assert_eq!(reg.grad_z2_anchor.data(), base.grad_a.data());
        assert!(reg.grad_z1_anchor.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_z2_rows_contribute_no_regularizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z1 = gaussian_matrix(5, 4, 1.0, &mut rng);
        let z2 = DenseMatrix::from_fn(5, 3, |_, c| if c == 0 { 1.0 } else { 0.0 }).unwrap();
        let base = infonce_loss(&z2, &z2, 0.2).unwrap();
        let reg = bottleneck_regularized_loss(&z1, &z2, base, 0.1, 1.0).unwrap();
        assert!(reg.bundle.regularizer.abs() < 1e-12);
        assert!(reg.grad_z1_anchor.data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn regularized_total_is_linear_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z1 = gaussian_matrix(6, 4, 1.0, &mut rng);
        let z2 = gaussian_matrix(6, 3, 1.0, &mut rng);
        let base = infonce_loss(&z2, &z2, 0.2).unwrap();
        let lambda = 1e-4;
        let reg = bottleneck_regularized_loss(&z1, &z2, base.clone(), 0.0, lambda).unwrap();
        assert!(
            (reg.bundle.total - (reg.bundle.objective + lambda * reg.bundle.regularizer)).abs()
                < 1e-15
        );
        // Gradient decomposes into base + lambda * regularizer parts.
        let (g1, g2) = matrix_mi_grad_alpha2(&z1, &z2).unwrap();
        for (combined, (b, r)) in reg
            .grad_z2_anchor
            .data()
            .iter()
            .zip(base.grad_a.data().iter().zip(g2.data()))
        {
            assert!((combined - (b + lambda * r)).abs() < 1e-12);
        }
        for (lam_r, r) in reg.grad_z1_anchor.data().iter().zip(g1.data()) {
            assert!((lam_r - lambda * r).abs() < 1e-15);
        }
    }
}
