//! Extreme ranks from the global analytic empirical VBMF solution, and
//! weakened ranks derived from them.
//!
//! The VBMF estimator works on an `L × M` matrix with `L ≤ M` (wider inputs
//! are transposed). With `α = L/M` and singular values `γ_h`, the noise
//! variance `σ²` minimizes the closed-form free energy
//!
//! ```text
//! Σ_{x_h ≤ x̄} (x_h − ln x_h) + Σ_{x_h > x̄} (x_h − τ(x_h) + ln((τ(x_h)+1)/x_h) + α ln(τ(x_h)/α + 1))
//! x_h = γ_h² / (M σ²),   τ(x) = ½ (x − (1+α) + √((x − (1+α))² − 4α))
//! ```
//!
//! over a bounded interval, with `x̄ = (1+τ̄)(1+α/τ̄)` and `τ̄ = 2.5129 √α`.
//! A component survives when `γ_h > √(M σ² x̄)`; the number of survivors is
//! the extreme rank.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::singular_values;
use crate::model::{
    canonical_conv_core, canonical_fc_core, kernel_dims, Layer, ModelGraph,
};
use crate::tensor::{matricize, Matrix, Tensor};

/// Modes at or below this extent are left alone by weakening.
pub const SMALL_RANK_LIMIT: usize = 20;
pub const DEFAULT_WEAKENING: f64 = 0.6;
/// Band of weakening factors that work well in practice.
pub const RECOMMENDED_WEAKENING: (f64, f64) = (0.5, 0.7);

/// Result of the VBMF rank estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VbmfEstimate {
    pub rank: usize,
    pub noise_variance: f64,
    /// Singular values above this are kept.
    pub threshold: f64,
}

fn tau(x: f64, alpha: f64) -> f64 {
    let b = x - (1.0 + alpha);
    0.5 * (b + (b * b - 4.0 * alpha).max(0.0).sqrt())
}

fn free_energy(sigma2: f64, s: &[f64], l: f64, m: f64, xubar: f64) -> f64 {
    let alpha = l / m;
    s.iter()
        .map(|&g| {
            let x = g * g / (m * sigma2);
            if x > xubar {
                let t = tau(x, alpha);
                x - t + ((t + 1.0) / x).ln() + alpha * (t / alpha + 1.0).ln()
            } else {
                x - x.ln()
            }
        })
        .sum()
}

/// Bounded minimization: a log-spaced scan followed by golden-section
/// refinement around the best grid point.
fn minimize_bounded(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    const GRID: usize = 96;
    let (llo, lhi) = (lo.ln(), hi.ln());
    let at = |i: usize| (llo + (lhi - llo) * i as f64 / GRID as f64).exp();
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for i in 0..=GRID {
        let v = f(at(i));
        if v < best_val {
            best_val = v;
            best = i;
        }
    }
    let mut a = at(best.saturating_sub(1)).ln();
    let mut b = at((best + 1).min(GRID)).ln();
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c.exp()), f(d.exp()));
    for _ in 0..100 {
        if (b - a).abs() < 1e-12 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d.exp());
        }
    }
    let x = (0.5 * (a + b)).exp();
    if f(x) <= best_val {
        x
    } else {
        at(best)
    }
}

/// Global analytic empirical VBMF on `a` with automatically estimated noise.
pub fn vbmf(a: &Matrix) -> Result<VbmfEstimate> {
    let (l, m) = if a.rows() <= a.cols() {
        (a.rows(), a.cols())
    } else {
        (a.cols(), a.rows())
    };
    let s = singular_values(a)?;
    let smax = s[0];
    if smax == 0.0 {
        return Err(Error::DegenerateInput("all-zero matrix".into()));
    }

    // Exactly rank-deficient input: zero noise, every nonzero component is signal.
    let tol = smax * (m as f64) * f64::EPSILON;
    let numerical_rank = s.iter().filter(|&&g| g > tol).count();
    if numerical_rank < l {
        return Ok(VbmfEstimate {
            rank: numerical_rank,
            noise_variance: 0.0,
            threshold: tol,
        });
    }

    let (lf, mf) = (l as f64, m as f64);
    let alpha = lf / mf;
    let tau_bar = 2.5129 * alpha.sqrt();
    let xubar = (1.0 + tau_bar) * (1.0 + alpha / tau_bar);

    let upper = s.iter().map(|g| g * g).sum::<f64>() / (lf * mf);
    // Zero-based index of the last component allowed to carry signal.
    let eh_ub = ((lf / (1.0 + alpha)).ceil() as usize).saturating_sub(1).min(l) as isize - 1;
    let start = (eh_ub + 1).max(0) as usize;
    let tail = &s[start..];
    let tail_mean = tail.iter().map(|g| g * g).sum::<f64>() / tail.len() as f64;
    let lower = (s[start] * s[start] / (mf * xubar)).max(tail_mean / mf);

    let sigma2 = minimize_bounded(
        |v| free_energy(v, &s, lf, mf, xubar),
        lower.min(upper),
        lower.max(upper),
    );
    let threshold = (mf * sigma2 * xubar).sqrt();
    let rank = s.iter().filter(|&&g| g > threshold).count();
    Ok(VbmfEstimate {
        rank,
        noise_variance: sigma2,
        threshold,
    })
}

/// Number of components VBMF keeps. Zero means "no signal"; callers clamp it
/// to 1 before decomposing.
pub fn vbmf_extreme_rank(a: &Matrix) -> Result<usize> {
    Ok(vbmf(a)?.rank)
}

/// VBMF on the mode-3 and mode-4 unfoldings of a 4-way conv kernel.
pub fn extreme_ranks_for_conv(kernel: &Tensor) -> Result<BTreeMap<usize, usize>> {
    if kernel.ndim() != 4 {
        return Err(Error::invalid(format!(
            "expected a 4-way kernel, got shape {:?}",
            kernel.shape()
        )));
    }
    let mut out = BTreeMap::new();
    for mode in [3, 4] {
        out.insert(mode, vbmf_extreme_rank(&matricize(kernel, mode)?)?);
    }
    Ok(out)
}

pub fn extreme_rank_for_fc(weight: &Matrix) -> Result<usize> {
    vbmf_extreme_rank(weight)
}

/// Checks a weakening factor: must lie in `(0, 1)`. Returns `false` when it
/// falls outside the recommended band.
pub fn check_weakening_factor(k: f64) -> Result<bool> {
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::invalid(format!("weakening factor {k} must lie in (0, 1)")));
    }
    Ok((RECOMMENDED_WEAKENING.0..=RECOMMENDED_WEAKENING.1).contains(&k))
}

/// `R_i − k (R_i − R_e)` for `R_i > 20`, else `R_i`; rounded half-up and
/// clamped into `[R_e, R_i]`.
pub fn weaken(initial: usize, extreme: usize, k: f64) -> Result<usize> {
    check_weakening_factor(k)?;
    weaken_unchecked(initial, extreme, k)
}

fn weaken_unchecked(initial: usize, extreme: usize, k: f64) -> Result<usize> {
    if extreme == 0 || extreme > initial {
        return Err(Error::invalid(format!(
            "need 1 <= extreme rank ({extreme}) <= initial rank ({initial})"
        )));
    }
    if initial <= SMALL_RANK_LIMIT {
        return Ok(initial);
    }
    let (ri, re) = (initial as f64, extreme as f64);
    let w = (ri - k * (ri - re) + 0.5).floor() as usize;
    Ok(w.clamp(extreme, initial))
}

/// How ranks are reduced from the extreme estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RankMode {
    /// Weaken with factor `k`.
    Weakened(f64),
    /// Jump straight to the extreme rank (the one-shot baseline). Small
    /// modes still pass through.
    Extreme,
}

impl RankMode {
    pub fn factor(&self) -> f64 {
        match self {
            RankMode::Weakened(k) => *k,
            RankMode::Extreme => 1.0,
        }
    }

    fn apply(&self, initial: usize, extreme: usize) -> Result<usize> {
        match self {
            RankMode::Weakened(k) => weaken(initial, extreme, *k),
            RankMode::Extreme => weaken_unchecked(initial, extreme, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeRanks {
    pub initial: usize,
    pub extreme: usize,
    pub weakened: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// Every mode is at or below the small-rank limit.
    SmallEnough,
    /// Weakening leaves every rank unchanged.
    NoReduction,
    /// The factorized form would not have fewer parameters.
    NotCheaper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub layer_index: usize,
    pub layer_kind: String,
    /// Mode 3/4 for conv layers; mode 1 carries the matrix rank of FC layers.
    pub modes: BTreeMap<usize, ModeRanks>,
    pub weakening_factor: f64,
    /// VBMF found no signal on some mode; its extreme rank was raised to 1.
    pub near_pure_noise: bool,
    pub params_before: u64,
    pub params_after: u64,
    pub skip: Option<SkipReason>,
}

impl RankPlan {
    pub fn decomposes(&self) -> bool {
        self.skip.is_none()
    }

    pub fn weakened(&self, mode: usize) -> Option<usize> {
        self.modes.get(&mode).map(|m| m.weakened)
    }
}

fn conv_params(s: usize, t: usize, kh: usize, kw: usize) -> u64 {
    (kh * kw * s * t + t) as u64
}

fn factorized_conv_params(s: usize, t: usize, kh: usize, kw: usize, r3: usize, r4: usize) -> u64 {
    (s * r3 + kh * kw * r3 * r4 + r4 * t + t) as u64
}

fn fc_params(out: usize, inp: usize) -> u64 {
    (out * inp + out) as u64
}

fn factorized_fc_params(out: usize, inp: usize, p: usize) -> u64 {
    (p * inp + out * p + out) as u64
}

struct Analysis {
    modes: BTreeMap<usize, ModeRanks>,
    near_pure_noise: bool,
}

fn analyze(unfoldings: Vec<(usize, Matrix, usize)>, mode: RankMode) -> Result<Analysis> {
    let mut modes = BTreeMap::new();
    let mut near_pure_noise = false;
    for (m, unfolding, initial) in unfoldings {
        // An all-zero unfolding carries no signal at all.
        let raw = match vbmf_extreme_rank(&unfolding) {
            Err(Error::DegenerateInput(_)) => 0,
            other => other?,
        };
        if raw == 0 {
            near_pure_noise = true;
        }
        let extreme = raw.clamp(1, initial);
        let weakened = mode.apply(initial, extreme)?;
        modes.insert(
            m,
            ModeRanks {
                initial,
                extreme,
                weakened,
            },
        );
    }
    Ok(Analysis {
        modes,
        near_pure_noise,
    })
}

/// Rank plan for one layer, or `None` for layers that are not decomposable.
pub fn plan_layer(layer: &Layer, index: usize, mode: RankMode) -> Result<Option<RankPlan>> {
    let (analysis, params_before, params_after) = match layer {
        Layer::Conv(c) => {
            let (kh, kw, s, t) = kernel_dims(&c.kernel);
            let a = analyze(
                vec![
                    (3, matricize(&c.kernel, 3)?, s),
                    (4, matricize(&c.kernel, 4)?, t),
                ],
                mode,
            )?;
            let after = factorized_conv_params(s, t, kh, kw, a.modes[&3].weakened, a.modes[&4].weakened);
            (a, conv_params(s, t, kh, kw), after)
        }
        Layer::FactorizedConv(f) => {
            let (kh, kw, r3, r4) = kernel_dims(&f.middle);
            let (s, t) = (f.in_channels(), f.out_channels());
            let (_, core, _) = canonical_conv_core(f)?;
            let a = analyze(
                vec![(3, matricize(&core, 3)?, r3), (4, matricize(&core, 4)?, r4)],
                mode,
            )?;
            let after = factorized_conv_params(s, t, kh, kw, a.modes[&3].weakened, a.modes[&4].weakened);
            (a, factorized_conv_params(s, t, kh, kw, r3, r4), after)
        }
        Layer::Fc(f) => {
            let (out, inp) = (f.weight.rows(), f.weight.cols());
            let a = analyze(vec![(1, f.weight.clone(), out.min(inp))], mode)?;
            let after = factorized_fc_params(out, inp, a.modes[&1].weakened);
            (a, fc_params(out, inp), after)
        }
        Layer::FactorizedFc(f) => {
            let (out, inp, p) = (f.last.rows(), f.first.cols(), f.rank());
            let (_, core, _) = canonical_fc_core(f)?;
            let a = analyze(vec![(1, core, p)], mode)?;
            let after = factorized_fc_params(out, inp, a.modes[&1].weakened);
            (a, factorized_fc_params(out, inp, p), after)
        }
        _ => return Ok(None),
    };
    let skip = if analysis.modes.values().all(|m| m.initial <= SMALL_RANK_LIMIT) {
        Some(SkipReason::SmallEnough)
    } else if analysis.modes.values().all(|m| m.weakened == m.initial) {
        Some(SkipReason::NoReduction)
    } else if params_after >= params_before {
        Some(SkipReason::NotCheaper)
    } else {
        None
    };
    Ok(Some(RankPlan {
        layer_index: index,
        layer_kind: layer.kind().to_string(),
        modes: analysis.modes,
        weakening_factor: mode.factor(),
        near_pure_noise: analysis.near_pure_noise,
        params_before,
        params_after,
        skip,
    }))
}

/// One plan per conv/FC layer (plain or factorized).
pub fn build_rank_plan(model: &ModelGraph, mode: RankMode) -> Result<Vec<RankPlan>> {
    let mut plans = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        if let Some(p) = plan_layer(layer, i, mode)? {
            plans.push(p);
        }
    }
    if plans.is_empty() {
        return Err(Error::NothingToDo("model has no conv or fc layers".into()));
    }
    Ok(plans)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weaken_examples() {
        assert_eq!(weaken(256, 64, 0.5).unwrap(), 160);
        for k in [0.1, 0.5, 0.9] {
            assert_eq!(weaken(20, 5, k).unwrap(), 20);
        }
        assert_eq!(weaken(100, 100, 0.6).unwrap(), 100);
        // 21 - 0.6 * 20 = 9
        assert_eq!(weaken(21, 1, 0.6).unwrap(), 9);
        // 30 - 0.5 * 5 = 27.5 rounds up
        assert_eq!(weaken(30, 25, 0.5).unwrap(), 28);
    }

    #[test]
    fn weaken_rejects_bad_inputs() {
        assert!(weaken(10, 0, 0.5).is_err());
        assert!(weaken(10, 11, 0.5).is_err());
        assert!(weaken(30, 10, 0.0).is_err());
        assert!(weaken(30, 10, 1.0).is_err());
        assert!(weaken(30, 10, f64::NAN).is_err());
    }

    #[test]
    fn factor_band() {
        assert!(check_weakening_factor(0.6).unwrap());
        assert!(!check_weakening_factor(0.9).unwrap());
        assert!(check_weakening_factor(1.2).is_err());
    }

    #[test]
    fn extreme_mode_jumps_to_extreme() {
        assert_eq!(RankMode::Extreme.apply(64, 9).unwrap(), 9);
        assert_eq!(RankMode::Extreme.apply(16, 3).unwrap(), 16);
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        assert!(matches!(
            vbmf_extreme_rank(&Matrix::zeros(5, 4)),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn exact_low_rank_returns_numerical_rank() {
        let a = Matrix::from_fn(6, 9, |i, j| (i + 1) as f64 * (j as f64 - 3.0));
        assert_eq!(vbmf_extreme_rank(&a).unwrap(), 1);
    }

    #[test]
    fn golden_section_finds_interior_minimum() {
        let x = minimize_bounded(|v| (v.ln() - 1.0).powi(2), 0.01, 100.0);
        assert!((x - 1f64.exp()).abs() < 1e-6);
    }
}
