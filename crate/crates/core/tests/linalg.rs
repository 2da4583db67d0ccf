//! Matrix, SVD and split properties checked against an independent reference
//! SVD (nalgebra) and a high-precision fixture.

use ailora::factorization::{reconstruct, split_minor, split_principal};
use ailora::matrix::{add, frobenius_norm, matmul, scale, sub, transpose};
use ailora::svd::svd;
use ailora::Matrix;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]).unwrap()
}

/// Singular values from nalgebra, descending.
fn reference_sigma(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Best rank-r approximation from the reference SVD.
fn reference_truncation(m: &Matrix, r: usize) -> Matrix {
    let svd = to_na(m).svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut out = DMatrix::zeros(m.rows(), m.cols());
    for &i in &order[..r] {
        out += svd.singular_values[i] * u.column(i) * vt.row(i);
    }
    from_na(&out)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn gram_defect(m: &Matrix) -> f64 {
    m.t_matmul(m).unwrap().sub(&Matrix::identity(m.cols())).unwrap().frobenius_norm()
}

#[test]
fn matrix_examples() {
    let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
    let b = Matrix::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap();
    assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&[[19.0, 22.0], [43.0, 50.0]]).unwrap());
    assert_eq!(frobenius_norm(&Matrix::identity(4)), 2.0);
    assert_eq!(frobenius_norm(&Matrix::from_rows(&[[3.0, 4.0]]).unwrap()), 5.0);
    assert_eq!(transpose(&transpose(&a)), a);
    assert_eq!(sub(&a, &a).unwrap(), Matrix::zeros(2, 2));
    assert_eq!(scale(&a, 0.0).unwrap(), Matrix::zeros(2, 2));
    assert_eq!(add(&a, &b).unwrap().get(1, 1), 12.0);
    assert!(matmul(&a, &Matrix::zeros(3, 1)).is_err());
}

#[test]
fn svd_matches_high_precision_fixture() {
    let fixture: serde_json::Value = serde_json::from_str(include_str!("fixtures/svd_8x5.json")).unwrap();
    let rows: Vec<Vec<f64>> = serde_json::from_value(fixture["rows"].clone()).unwrap();
    let sigma: Vec<f64> = serde_json::from_value(fixture["sigma"].clone()).unwrap();
    let w = Matrix::from_fn(8, 5, |i, j| rows[i][j]).unwrap();
    let d = svd(&w).unwrap();
    assert_eq!(d.sigma.len(), 5);
    for (got, want) in d.sigma.iter().zip(&sigma) {
        assert!(rel(*got, *want) < 1e-9, "sigma {got} vs {want}");
    }
    assert!(d.reconstruct().sub(&w).unwrap().frobenius_norm() / w.frobenius_norm().max(1.0) < 1e-10);
}

#[test]
fn svd_matches_nalgebra_on_seeded_8x5() {
    let w = random(8, 5, 8005);
    let d = svd(&w).unwrap();
    for (got, want) in d.sigma.iter().zip(reference_sigma(&w)) {
        assert!(rel(*got, want) < 1e-9);
    }
}

#[test]
fn eckart_young_against_reference() {
    for seed in 0..20 {
        let (m, n) = (3 + seed as usize % 9, 2 + (seed as usize * 7) % 11);
        let w = random(m, n, 100 + seed);
        let d = svd(&w).unwrap();
        let sigma = reference_sigma(&w);
        for r in 1..=m.min(n) {
            let trunc = Matrix::from_fn(m, n, |i, j| (0..r).map(|c| d.u.get(i, c) * d.sigma[c] * d.v.get(j, c)).sum()).unwrap();
            let err = w.sub(&trunc).unwrap().sum_squares();
            let tail: f64 = sigma[r..].iter().map(|s| s * s).sum();
            if tail > 1e-20 {
                assert!(rel(err, tail) < 1e-9, "seed {seed} r {r}: {err} vs {tail}");
            } else {
                assert!(err < 1e-20);
            }
        }
    }
}

#[test]
fn split_12x8_rank3_error_equals_tail() {
    let w = random(12, 8, 1208);
    let s = split_principal(&w, 3).unwrap();
    let sigma = reference_sigma(&w);
    let tail = sigma[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(rel(w.sub(&s.low_rank()).unwrap().frobenius_norm(), tail) < 1e-9);
}

#[test]
fn minor_10x10_rank4_residual_is_best_rank6() {
    let w = random(10, 10, 1010);
    let s = split_minor(&w, 4).unwrap();
    let best = reference_truncation(&w, 6);
    assert!(s.residual.relative_distance(&best).unwrap() < 1e-9);
}

#[test]
fn principal_and_minor_complement() {
    for (m, n, seed) in [(9, 6, 1), (6, 9, 2), (7, 7, 3)] {
        let w = random(m, n, seed);
        let k = m.min(n);
        for r in 1..k {
            let top = split_principal(&w, r).unwrap().low_rank();
            let rest = split_minor(&w, k - r).unwrap().residual;
            assert!(top.relative_distance(&rest).unwrap() < 1e-9);
        }
    }
}

#[test]
fn principal_column_space_matches_reference() {
    let w = random(12, 8, 77);
    let sigma = reference_sigma(&w);
    let r = 3;
    assert!(sigma[r - 1] > sigma[r] + 1e-8);
    let b = split_principal(&w, r).unwrap().b;
    // P_b = B (BᵀB)⁻¹ Bᵀ, computed with nalgebra.
    let bn = to_na(&b);
    let p_b = &bn * (bn.transpose() * &bn).try_inverse().unwrap() * bn.transpose();
    let u = to_na(&w).svd(true, false).u.unwrap();
    let mut order: Vec<usize> = (0..8).collect();
    let sv = to_na(&w).singular_values();
    order.sort_by(|&a, &c| sv[c].total_cmp(&sv[a]));
    let mut p_u = DMatrix::zeros(12, 12);
    for &i in &order[..r] {
        p_u += u.column(i) * u.column(i).transpose();
    }
    assert!((p_b - p_u).norm() < 1e-8);
}

fn arb_matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(m, n)| {
        proptest::collection::vec(-10.0f64..10.0, m * n).prop_map(move |v| Matrix::new(m, n, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_invariants(w in arb_matrix(32)) {
        let d = svd(&w).unwrap();
        let k = w.rows().min(w.cols());
        prop_assert_eq!(d.sigma.len(), k);
        prop_assert!(d.sigma.windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(d.sigma.iter().all(|&s| s >= 0.0));
        prop_assert!(gram_defect(&d.u) < 1e-10);
        prop_assert!(gram_defect(&d.v) < 1e-10);
        prop_assert!(d.reconstruct().sub(&w).unwrap().frobenius_norm() / w.frobenius_norm().max(1.0) < 1e-10);
    }

    #[test]
    fn transpose_has_same_spectrum(w in arb_matrix(16)) {
        let a = svd(&w).unwrap().sigma;
        let b = svd(&w.transpose()).unwrap().sigma;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-10 * a[0].max(1.0));
        }
    }

    #[test]
    fn splits_reconstruct_and_balance(w in arb_matrix(16), frac in 0.0f64..1.0) {
        let k = w.rows().min(w.cols());
        let r = 1 + ((k - 1) as f64 * frac) as usize;
        let sigma = svd(&w).unwrap().sigma;
        for (s, selected) in [(split_principal(&w, r).unwrap(), &sigma[..r]), (split_minor(&w, r).unwrap(), &sigma[k - r..])] {
            prop_assert!(reconstruct(&s).sub(&w).unwrap().frobenius_norm() / w.frobenius_norm().max(f64::MIN_POSITIVE) < 1e-10);
            let energy: f64 = selected.iter().sum();
            let (nb, na) = (s.b.sum_squares(), s.a.sum_squares());
            prop_assert!((nb - energy).abs() <= 1e-9 * energy.max(1e-300));
            prop_assert!((na - energy).abs() <= 1e-9 * energy.max(1e-300));
            let squares: f64 = selected.iter().map(|v| v * v).sum();
            prop_assert!((s.low_rank().sum_squares() - squares).abs() <= 1e-9 * squares.max(1e-12));
        }
    }

    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..8, 1usize..8, 1usize..8, 1usize..8).prop_flat_map(|(m, k, l, n)| (
            proptest::collection::vec(-3.0f64..3.0, m * k).prop_map(move |v| Matrix::new(m, k, v).unwrap()),
            proptest::collection::vec(-3.0f64..3.0, k * l).prop_map(move |v| Matrix::new(k, l, v).unwrap()),
            proptest::collection::vec(-3.0f64..3.0, l * n).prop_map(move |v| Matrix::new(l, n, v).unwrap()),
        ))
    ) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.sub(&right).unwrap().frobenius_norm() <= 1e-9 * right.frobenius_norm().max(1.0));
    }

    #[test]
    fn norm_of_transpose_is_exact(w in arb_matrix(24)) {
        prop_assert_eq!(w.sum_squares(), w.transpose().sum_squares());
    }
}
