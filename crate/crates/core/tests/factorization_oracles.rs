mod common;

use std::collections::BTreeMap;

use common::{normals, random_matrix, random_orthonormal, random_tensor, rng};
use lowrank::factorization::{
    hosvd, relative_error, singular_values, svd, truncated_svd, Reconstruct,
};
use lowrank::tensor::{matricize, mode_product, Matrix, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn gram_deviation(q: &Matrix) -> f64 {
    let g = q.t_matmul(q).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g.get(i, j) - target).abs());
        }
    }
    worst
}

#[test]
fn singular_values_match_gram_eigen_oracle() {
    let mut r = rng(11);
    for _ in 0..10 {
        let a = random_matrix(&mut r, 8, 6);
        let dm = DMatrix::from_row_slice(8, 6, a.data());
        let gram = dm.transpose() * &dm;
        let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
        eig.sort_by(|x, y| y.total_cmp(x));
        let res = truncated_svd(&a, 3).unwrap();
        for (s, e) in res.s.iter().zip(&eig) {
            assert!((s - e).abs() <= 1e-8 * e.max(1.0), "{s} vs {e}");
        }
        assert_eq!(res.rank(), 3);
    }
}

#[test]
fn truncation_error_is_tail_energy() {
    let mut r = rng(12);
    let a = random_matrix(&mut r, 9, 7);
    let s = singular_values(&a).unwrap();
    for p in 1..=7 {
        let approx = truncated_svd(&a, p).unwrap().reconstruct();
        let err = Matrix::from_fn(9, 7, |i, j| a.get(i, j) - approx.get(i, j)).frobenius_norm();
        let tail = s[p..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((err - tail).abs() <= 1e-8 * a.frobenius_norm());
    }
}

#[test]
fn rank_deficient_input_recovers_exactly() {
    let mut r = rng(13);
    let a = random_matrix(&mut r, 10, 3).matmul(&random_matrix(&mut r, 3, 8)).unwrap();
    let approx = truncated_svd(&a, 3).unwrap().reconstruct();
    assert!(relative_error(&a, &approx).unwrap() <= 1e-9);
}

#[test]
fn svd_reconstruction_is_idempotent() {
    let mut r = rng(14);
    let a = random_matrix(&mut r, 6, 9);
    let once = truncated_svd(&a, 2).unwrap().reconstruct();
    let twice = truncated_svd(&once, 2).unwrap().reconstruct();
    assert!(relative_error(&once, &twice).unwrap() <= 1e-10);
    let full = truncated_svd(&a, 6).unwrap().reconstruct();
    assert!(relative_error(&a, &full).unwrap() <= 1e-10);
}

#[test]
fn svd_is_deterministic() {
    let a = random_matrix(&mut rng(15), 7, 5);
    assert_eq!(svd(&a).unwrap(), svd(&a).unwrap());
}

#[test]
fn relative_error_matches_loop() {
    let mut r = rng(16);
    let a = random_tensor(&mut r, &[3, 4, 5]);
    let b = random_tensor(&mut r, &[3, 4, 5]);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..3 {
        for j in 0..4 {
            for k in 0..5 {
                num += (a.get(&[i, j, k]) - b.get(&[i, j, k])).powi(2);
                den += a.get(&[i, j, k]).powi(2);
            }
        }
    }
    let expected = (num / den).sqrt();
    assert!((relative_error(&a, &b).unwrap() - expected).abs() <= 1e-12 * expected);
    let zero = Tensor::zeros(&[3, 4, 5]).unwrap();
    assert_eq!(relative_error(&a, &zero).unwrap(), 1.0);
    assert_eq!(relative_error(&a, &a).unwrap(), 0.0);
}

fn channel_ranks(r3: usize, r4: usize) -> BTreeMap<usize, usize> {
    BTreeMap::from([(3, r3), (4, r4)])
}

/// `B₀ ×₃ Q₃ ×₄ Q₄` with orthonormal `Q`.
fn planted_kernel(seed: u64, shape: [usize; 4], r3: usize, r4: usize) -> Tensor {
    let mut r = rng(seed);
    let core = random_tensor(&mut r, &[shape[0], shape[1], r3, r4]);
    let q3 = random_orthonormal(&mut r, shape[2], r3);
    let q4 = random_orthonormal(&mut r, shape[3], r4);
    mode_product(&mode_product(&core, &q3, 3).unwrap(), &q4, 4).unwrap()
}

#[test]
fn hosvd_recovers_planted_ranks() {
    let t = planted_kernel(17, [3, 3, 8, 10], 2, 3);
    let res = hosvd(&t, &channel_ranks(2, 3)).unwrap();
    assert_eq!(res.core.shape(), &[3, 3, 2, 3]);
    assert!(relative_error(&t, &res.reconstruct()).unwrap() <= 1e-9);
}

#[test]
fn hosvd_matches_projection_oracle() {
    let mut r = rng(18);
    let t = random_tensor(&mut r, &[3, 3, 8, 16]);
    let res = hosvd(&t, &channel_ranks(4, 8)).unwrap();
    // Independent oracle: project onto leading left singular subspaces
    // obtained from a Gram eigendecomposition of each unfolding.
    let mut projected = t.clone();
    for (mode, rank) in [(3usize, 4usize), (4, 8)] {
        let unf = matricize(&t, mode).unwrap();
        let dm = DMatrix::from_row_slice(unf.rows(), unf.cols(), unf.data());
        let eig = (&dm * dm.transpose()).symmetric_eigen();
        let mut order: Vec<usize> = (0..unf.rows()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let basis = Matrix::from_fn(unf.rows(), rank, |i, j| eig.eigenvectors[(i, order[j])]);
        let proj = basis.matmul(&basis.transpose()).unwrap();
        projected = mode_product(&projected, &proj, mode).unwrap();
    }
    let oracle_err = relative_error(&t, &projected).unwrap();
    let err = relative_error(&t, &res.reconstruct()).unwrap();
    assert!((err - oracle_err).abs() <= 1e-9, "{err} vs {oracle_err}");
}

#[test]
fn hosvd_factors_orthonormal_and_core_all_orthogonal() {
    let mut r = rng(19);
    let t = random_tensor(&mut r, &[3, 3, 6, 7]);
    let res = hosvd(&t, &channel_ranks(6, 7)).unwrap();
    for f in res.factors.values() {
        assert!(gram_deviation(f) <= 1e-10);
    }
    for mode in [3, 4] {
        let unf = matricize(&res.core, mode).unwrap();
        let g = unf.matmul(&unf.transpose()).unwrap();
        let scale = g.frobenius_norm();
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                if i != j {
                    assert!(g.get(i, j).abs() <= 1e-8 * scale);
                }
            }
        }
    }
    assert!(relative_error(&t, &res.reconstruct()).unwrap() <= 1e-10);
}

#[test]
fn hosvd_error_is_monotone_in_each_rank() {
    let t = random_tensor(&mut rng(20), &[3, 3, 6, 6]);
    for r4 in 1..=6 {
        let mut prev = f64::INFINITY;
        for r3 in 1..=6 {
            let e = relative_error(&t, &hosvd(&t, &channel_ranks(r3, r4)).unwrap().reconstruct()).unwrap();
            assert!(e <= prev + 1e-12);
            prev = e;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_invariants(seed in any::<u64>(), m in 1usize..12, n in 1usize..12) {
        let mut r = rng(seed);
        let a = Matrix::new(m, n, normals(&mut r, m * n)).unwrap();
        let full = svd(&a).unwrap();
        prop_assert!(gram_deviation(&full.u) <= 1e-10);
        prop_assert!(gram_deviation(&full.v) <= 1e-10);
        prop_assert!(full.s.windows(2).all(|w| w[0] >= w[1]) && full.s.iter().all(|&s| s >= 0.0));
        let mut prev = f64::INFINITY;
        for p in 1..=m.min(n) {
            let e = relative_error(&a, &truncated_svd(&a, p).unwrap().reconstruct()).unwrap();
            prop_assert!(e <= prev + 1e-12);
            prev = e;
        }
        prop_assert!(prev <= 1e-10);
    }

    #[test]
    fn eckart_young_beats_random_factors(seed in any::<u64>(), m in 2usize..16, n in 2usize..16) {
        let mut r = rng(seed);
        let a = random_matrix(&mut r, m, n);
        let p = 1 + (seed as usize) % m.min(n);
        let best = relative_error(&a, &truncated_svd(&a, p).unwrap().reconstruct()).unwrap();
        for _ in 0..20 {
            let guess = random_matrix(&mut r, m, p).matmul(&random_matrix(&mut r, p, n)).unwrap();
            prop_assert!(best <= relative_error(&a, &guess).unwrap());
        }
    }
}
