//! Identity and range checks for the matrix-entropy family, plus the
//! 50-instance finite-difference audit of its analytic gradients.

mod common;

use common::{assert_grad_close, fd_grad};
use projinfo_core::minfo::{
    matrix_entropy, matrix_entropy_grad_alpha2, matrix_mi, matrix_mi_grad_alpha2, EntropyOrder,
};
use projinfo_core::tensor::{gram, row_normalize};
use projinfo_core::{DenseMatrix, GramKernel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_kernel(n: usize, d: usize, rng: &mut ChaCha8Rng) -> GramKernel {
    let raw = DenseMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)).unwrap();
    gram(&row_normalize(&raw).unwrap()).unwrap()
}

#[test]
fn entropy_range_and_order_monotonicity_on_random_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let orders: Vec<(f64, EntropyOrder)> = [0.5, 1.0, 2.0, 3.0]
        .iter()
        .map(|&a| (a, EntropyOrder::new(a).unwrap()))
        .collect();
    for trial in 0..1000 {
        let n = 2 + (trial % 31);
        let d = 1 + (trial % 7);
        let g = random_kernel(n, d, &mut rng);
        let ln_n = (n as f64).ln();

        let mut h = [0.0; 4];
        for (slot, (alpha, order)) in h.iter_mut().zip(&orders) {
            let v = matrix_entropy(&g, *order).unwrap();
            assert!(
                (-1e-10..=ln_n + 1e-10).contains(&v),
                "trial {trial} alpha {alpha}: H = {v} outside [0, ln {n}]"
            );
            *slot = v;
        }
        // Rényi entropy is nonincreasing in the order.
        assert!(h[3] <= h[2] + 1e-10, "trial {trial}: H3 > H2");
        assert!(h[2] <= h[1] + 1e-10, "trial {trial}: H2 > H1");
        assert!(h[1] <= h[0] + 1e-10, "trial {trial}: H1 > H0.5");
    }
}

#[test]
fn ones_kernel_mi_is_zero_and_identity_entropy_is_ln_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [2usize, 5, 16, 32] {
        let eye = GramKernel::try_new(
            DenseMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 }).unwrap(),
        )
        .unwrap();
        let h = matrix_entropy(&eye, EntropyOrder::quadratic()).unwrap();
        assert!((h - (n as f64).ln()).abs() < 1e-12);

        let ones =
            GramKernel::try_new(DenseMatrix::from_fn(n, n, |_, _| 1.0).unwrap()).unwrap();
        let g = random_kernel(n, 3, &mut rng);
        let mi = matrix_mi(&ones, &g, EntropyOrder::quadratic()).unwrap();
        assert!(mi.abs() < 1e-12, "n {n}: I(J, G) = {mi}");
    }
}

#[test]
fn entropy_gradient_fd_audit_50_instances() {
    let f = |z: &DenseMatrix| {
        let g = gram(&row_normalize(z).unwrap()).unwrap();
        matrix_entropy(&g, EntropyOrder::quadratic()).unwrap()
    };
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = 3 + (seed as usize % 5);
        let d = 2 + (seed as usize % 4);
        let z = DenseMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5)).unwrap();
        let analytic = matrix_entropy_grad_alpha2(&z).unwrap();
        let fd = fd_grad(f, &z, 1e-6);
        assert_grad_close(&analytic, &fd, 1e-4, &format!("entropy grad seed {seed}"));
    }
}

#[test]
fn mi_gradient_fd_audit_50_instances() {
    let f = |z1: &DenseMatrix, z2: &DenseMatrix| {
        let g1 = gram(&row_normalize(z1).unwrap()).unwrap();
        let g2 = gram(&row_normalize(z2).unwrap()).unwrap();
        matrix_mi(&g1, &g2, EntropyOrder::quadratic()).unwrap()
    };
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let n = 3 + (seed as usize % 6);
        let z1 = DenseMatrix::from_fn(n, 4, |_, _| rng.random_range(-1.5..1.5)).unwrap();
        let z2 = DenseMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.5..1.5)).unwrap();
        let (a1, a2) = matrix_mi_grad_alpha2(&z1, &z2).unwrap();
        let fd1 = fd_grad(|z| f(z, &z2), &z1, 1e-6);
        let fd2 = fd_grad(|z| f(&z1, z), &z2, 1e-6);
        assert_grad_close(&a1, &fd1, 1e-4, &format!("mi grad z1 seed {seed}"));
        assert_grad_close(&a2, &fd2, 1e-4, &format!("mi grad z2 seed {seed}"));
    }
}

#[test]
fn larger_random_pair_mi_matches_16x8_by_16x4_case() {
    // The shape used by the training harness's regularizer.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let z1 = DenseMatrix::from_fn(16, 8, |_, _| rng.random_range(-1.0..1.0)).unwrap();
    let z2 = DenseMatrix::from_fn(16, 4, |_, _| rng.random_range(-1.0..1.0)).unwrap();
    let (a1, a2) = matrix_mi_grad_alpha2(&z1, &z2).unwrap();
    let f = |za: &DenseMatrix, zb: &DenseMatrix| {
        let g1 = gram(&row_normalize(za).unwrap()).unwrap();
        let g2 = gram(&row_normalize(zb).unwrap()).unwrap();
        matrix_mi(&g1, &g2, EntropyOrder::quadratic()).unwrap()
    };
    let fd1 = fd_grad(|z| f(z, &z2), &z1, 1e-6);
    let fd2 = fd_grad(|z| f(&z1, z), &z2, 1e-6);
    assert_grad_close(&a1, &fd1, 1e-4, "16x8 grad z1");
    assert_grad_close(&a2, &fd2, 1e-4, "16x8 grad z2");
}
