//! Truncated SVD for 2-way kernels and HOSVD (orthogonal Tucker) for 4-way kernels.
//!
//! The SVD is a one-sided Jacobi iteration on the columns of the taller
//! orientation of the input. Kernels in this toolkit are at most a few
//! hundred entries per side, where Jacobi's accuracy matters more than its
//! cubic cost.
//!
//! Sign convention: the largest-magnitude entry of every left singular vector
//! is positive (first such entry on ties), and the right vector is flipped to
//! match. With that fixed, identical inputs give bit-identical factors.
//!
//! When singular values tie, truncation keeps the first `p` in computed order.
//! The retained subspace is then not unique, but every choice has the same error.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matricize, mode_product, Dense, Matrix, Tensor};

/// Rank-`p` factors `a ≈ u · diag(s) · vᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdResult {
    /// `m x p`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `n x p`, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Keeps the leading `p` triplets.
    pub fn truncate(&self, p: usize) -> Result<SvdResult> {
        if p == 0 || p > self.rank() {
            return Err(Error::invalid(format!(
                "cannot truncate a rank-{} SVD to rank {p}",
                self.rank()
            )));
        }
        Ok(SvdResult {
            u: self.u.first_columns(p),
            s: self.s[..p].to_vec(),
            v: self.v.first_columns(p),
        })
    }
}

/// Orthogonal Tucker factors: `t ≈ core ×_k factors[k]` over the decomposed modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuckerResult {
    pub core: Tensor,
    /// Keyed by 1-indexed mode; each factor has orthonormal columns.
    pub factors: BTreeMap<usize, Matrix>,
}

impl TuckerResult {
    pub fn decomposed_modes(&self) -> BTreeSet<usize> {
        self.factors.keys().copied().collect()
    }

    /// Retained rank per decomposed mode.
    pub fn ranks(&self) -> BTreeMap<usize, usize> {
        self.factors.iter().map(|(&k, f)| (k, f.cols())).collect()
    }
}

/// Rebuilds the dense array a factorization approximates.
pub trait Reconstruct {
    type Output;
    fn reconstruct(&self) -> Self::Output;
}

impl Reconstruct for SvdResult {
    type Output = Matrix;

    fn reconstruct(&self) -> Matrix {
        let scaled = Matrix::from_fn(self.u.rows(), self.u.cols(), |i, j| {
            self.u.get(i, j) * self.s[j]
        });
        scaled
            .matmul(&self.v.transpose())
            .expect("SVD factors are conformant by construction")
    }
}

impl Reconstruct for TuckerResult {
    type Output = Tensor;

    fn reconstruct(&self) -> Tensor {
        self.factors
            .iter()
            .fold(self.core.clone(), |acc, (&mode, factor)| {
                mode_product(&acc, factor, mode).expect("Tucker factors match core extents")
            })
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("input contains non-finite entries"))
    }
}

/// Thin SVD keeping all `min(m, n)` triplets.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    check_finite(a.data())?;
    if a.rows() >= a.cols() {
        Ok(jacobi_svd(a))
    } else {
        let t = jacobi_svd(&a.transpose());
        let mut res = SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        };
        fix_signs(&mut res);
        Ok(res)
    }
}

/// Best rank-`p` approximation factors of `a` in the Frobenius norm.
pub fn truncated_svd(a: &Matrix, p: usize) -> Result<SvdResult> {
    let max = a.rows().min(a.cols());
    if p == 0 || p > max {
        return Err(Error::invalid(format!(
            "rank {p} outside [1, {max}] for a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    svd(a)?.truncate(p)
}

/// Singular values only, non-increasing.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(a)?.s)
}

/// One-sided Jacobi for `m >= n`.
fn jacobi_svd(a: &Matrix) -> SvdResult {
    let (m, n) = (a.rows(), a.cols());
    debug_assert!(m >= n);
    // Column-major working copies: cols[j] is column j.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    const TOL: f64 = 1e-15;
    const MAX_SWEEPS: usize = 80;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = s.first().copied().unwrap_or(0.0);
    let negligible = smax * (m as f64) * f64::EPSILON;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (rank, &j) in order.iter().enumerate() {
        if s[rank] > negligible && s[rank] > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / s[rank]).collect());
        } else {
            u_cols.push(complete_basis(&u_cols, m));
        }
    }
    let u = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    let vm = Matrix::from_fn(n, n, |i, j| v[order[j]][i]);
    let mut res = SvdResult { u, s, v: vm };
    fix_signs(&mut res);
    res
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// A unit vector orthogonal to every vector in `basis`, taken from the
/// standard basis by twice-repeated Gram-Schmidt.
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for e in 0..m {
        let mut w = vec![0.0; m];
        w[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            return w.into_iter().map(|x| x / norm).collect();
        }
        if norm > best_norm {
            best_norm = norm;
            best = Some(w);
        }
    }
    let w = best.expect("basis is smaller than the ambient dimension");
    w.into_iter().map(|x| x / best_norm).collect()
}

/// The first `rank` columns of `u`. When the unfolding is wider than it is
/// tall in rank terms, the missing directions are filled with an arbitrary
/// orthonormal completion; the core is zero along them.
fn leading_basis(u: &Matrix, rank: usize) -> Matrix {
    if rank <= u.cols() {
        return u.first_columns(rank);
    }
    let mut cols: Vec<Vec<f64>> = (0..u.cols()).map(|j| u.column(j)).collect();
    while cols.len() < rank {
        let next = complete_basis(&cols, u.rows());
        cols.push(next);
    }
    Matrix::from_fn(u.rows(), rank, |i, j| cols[j][i])
}

fn fix_signs(res: &mut SvdResult) {
    let (m, p) = (res.u.rows(), res.u.cols());
    for j in 0..p {
        let mut pivot = 0;
        for i in 1..m {
            if res.u.get(i, j).abs() > res.u.get(pivot, j).abs() {
                pivot = i;
            }
        }
        if res.u.get(pivot, j) < 0.0 {
            for i in 0..m {
                res.u.set(i, j, -res.u.get(i, j));
            }
            for i in 0..res.v.rows() {
                res.v.set(i, j, -res.v.get(i, j));
            }
        }
    }
}

/// Thin QR `a = q · r` with `q` (`m x n`, orthonormal columns) and upper
/// triangular `r` (`n x n`), for `m >= n`. Rank-deficient columns get an
/// arbitrary orthonormal completion in `q` and a zero diagonal in `r`.
pub fn thin_qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = (a.rows(), a.cols());
    if m < n {
        return Err(Error::invalid(format!("thin QR needs rows >= cols, got {m}x{n}")));
    }
    check_finite(a.data())?;
    let scale = a.frobenius_norm();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut r = Matrix::zeros(n, n);
    for j in 0..n {
        let mut w = a.column(j);
        for _ in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let d: f64 = w.iter().zip(qi).map(|(x, y)| x * y).sum();
                r.set(i, j, r.get(i, j) + d);
                w.iter_mut().zip(qi).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > scale * 1e-14 && norm > 0.0 {
            r.set(j, j, norm);
            q.push(w.into_iter().map(|x| x / norm).collect());
        } else {
            q.push(complete_basis(&q, m));
        }
    }
    Ok((Matrix::from_fn(m, n, |i, j| q[j][i]), r))
}

/// HOSVD restricted to the modes present in `ranks` (1-indexed mode → rank).
///
/// Each factor is the leading left singular block of the mode's unfolding; the
/// core is `t` projected onto those factors. Modes not in `ranks` pass through.
pub fn hosvd(t: &Tensor, ranks: &BTreeMap<usize, usize>) -> Result<TuckerResult> {
    check_finite(t.data())?;
    let mut factors = BTreeMap::new();
    for (&mode, &rank) in ranks {
        if mode == 0 || mode > t.ndim() {
            return Err(Error::invalid(format!(
                "mode {mode} out of range for a {}-way tensor",
                t.ndim()
            )));
        }
        let extent = t.shape()[mode - 1];
        if rank == 0 || rank > extent {
            return Err(Error::invalid(format!(
                "rank {rank} outside [1, {extent}] for mode {mode}"
            )));
        }
        let unfolded = matricize(t, mode)?;
        let left = svd(&unfolded)?.u;
        factors.insert(mode, leading_basis(&left, rank));
    }
    let mut core = t.clone();
    for (&mode, factor) in &factors {
        core = mode_product(&core, &factor.transpose(), mode)?;
    }
    Ok(TuckerResult { core, factors })
}

/// Frobenius-norm relative error `‖original − approx‖ / ‖original‖`.
pub fn relative_error<A: Dense, B: Dense>(original: &A, approx: &B) -> Result<f64> {
    if original.dims() != approx.dims() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            original.dims(),
            approx.dims()
        )));
    }
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (a, b) in original.values().iter().zip(approx.values()) {
        diff += (a - b) * (a - b);
        norm += a * a;
    }
    if norm == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    Ok((diff / norm).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn orthonormality_error(m: &Matrix) -> f64 {
        let g = m.t_matmul(m).unwrap();
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
    fn identity_svd() {
        let r = truncated_svd(&Matrix::identity(4), 4).unwrap();
        assert_eq!(r.s, vec![1.0; 4]);
        assert!(relative_error(&Matrix::identity(4), &r.reconstruct()).unwrap() < 1e-15);
    }

    #[test]
    fn rank_one_outer_product() {
        let x = [1.0, -2.0, 0.5];
        let y = [3.0, 1.0, -1.0, 2.0];
        let a = Matrix::from_fn(3, 4, |i, j| x[i] * y[j]);
        let r = truncated_svd(&a, 1).unwrap();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((r.s[0] - nx * ny).abs() < 1e-12);
        assert!(relative_error(&a, &r.reconstruct()).unwrap() < 1e-14);
    }

    #[test]
    fn wide_and_tall_inputs_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(5, 9, &mut rng);
        let wide = svd(&a).unwrap();
        let tall = svd(&a.transpose()).unwrap();
        for (x, y) in wide.s.iter().zip(&tall.s) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(relative_error(&a, &wide.reconstruct()).unwrap() < 1e-13);
        assert!(orthonormality_error(&wide.u) < 1e-12);
        assert!(orthonormality_error(&wide.v) < 1e-12);
    }

    #[test]
    fn rank_deficient_completes_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = gaussian(8, 2, &mut rng);
        let r = gaussian(2, 5, &mut rng);
        let a = l.matmul(&r).unwrap();
        let full = svd(&a).unwrap();
        assert!(full.s[2] < 1e-12 * full.s[0]);
        assert!(orthonormality_error(&full.u) < 1e-12);
        let r2 = truncated_svd(&a, 2).unwrap();
        assert!(relative_error(&a, &r2.reconstruct()).unwrap() < 1e-12);
    }

    #[test]
    fn zero_matrix_svd() {
        let r = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(r.s, vec![0.0, 0.0]);
        assert!(orthonormality_error(&r.u) < 1e-12);
    }

    #[test]
    fn rejects_bad_rank_and_nan() {
        let a = Matrix::identity(3);
        assert!(matches!(truncated_svd(&a, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(truncated_svd(&a, 4), Err(Error::InvalidArgument(_))));
        let mut b = a.clone();
        b.set(1, 1, f64::NAN);
        assert!(matches!(truncated_svd(&b, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sign_convention_makes_largest_entry_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = gaussian(6, 4, &mut rng);
        let r = svd(&a).unwrap();
        for j in 0..r.u.cols() {
            let col = r.u.column(j);
            let pivot = col
                .iter()
                .copied()
                .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
            assert!(pivot > 0.0);
        }
        assert_eq!(svd(&a).unwrap(), r);
    }

    #[test]
    fn qr_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = gaussian(7, 4, &mut rng);
        let (q, r) = thin_qr(&a).unwrap();
        assert!(orthonormality_error(&q) < 1e-13);
        for i in 0..4 {
            for j in 0..i {
                assert_eq!(r.get(i, j), 0.0);
            }
        }
        assert!(relative_error(&a, &q.matmul(&r).unwrap()).unwrap() < 1e-14);
        assert!(thin_qr(&a.transpose()).is_err());
    }

    #[test]
    fn hosvd_full_rank_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::from_fn(&[3, 3, 5, 6], |_| rng.sample(StandardNormal)).unwrap();
        let ranks = BTreeMap::from([(3, 5), (4, 6)]);
        let tucker = hosvd(&t, &ranks).unwrap();
        assert_eq!(tucker.core.shape(), &[3, 3, 5, 6]);
        assert!(relative_error(&t, &tucker.reconstruct()).unwrap() < 1e-12);
        for f in tucker.factors.values() {
            assert!(orthonormality_error(f) < 1e-12);
        }
    }

    #[test]
    fn hosvd_rank_above_unfolding_width() {
        // Mode 3 has extent 6 but its unfolding has only 2 columns.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Tensor::from_fn(&[1, 1, 6, 2], |_| rng.sample(StandardNormal)).unwrap();
        let tucker = hosvd(&t, &BTreeMap::from([(3, 6), (4, 2)])).unwrap();
        assert!(orthonormality_error(&tucker.factors[&3]) < 1e-12);
        assert!(relative_error(&t, &tucker.reconstruct()).unwrap() < 1e-12);
    }

    #[test]
    fn hosvd_rejects_rank_above_extent() {
        let t = Tensor::zeros(&[2, 2, 3, 4]).unwrap();
        assert!(hosvd(&t, &BTreeMap::from([(3, 4)])).is_err());
        assert!(hosvd(&t, &BTreeMap::from([(5, 1)])).is_err());
    }

    #[test]
    fn relative_error_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = gaussian(3, 3, &mut rng);
        let b = gaussian(3, 3, &mut rng);
        assert_eq!(relative_error(&a, &a).unwrap(), 0.0);
        assert_eq!(relative_error(&a, &Matrix::zeros(3, 3)).unwrap(), 1.0);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                num += (a.get(i, j) - b.get(i, j)).powi(2);
                den += a.get(i, j).powi(2);
            }
        }
        let oracle = (num / den).sqrt();
        assert!((relative_error(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert!(relative_error(&Matrix::zeros(2, 2), &a.first_columns(2)).is_err());
        assert!(matches!(
            relative_error(&Matrix::zeros(3, 3), &b),
            Err(Error::UndefinedRatio)
        ));
    }
}
