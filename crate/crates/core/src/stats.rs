//! Paired Wilcoxon signed-rank test (two-sided).
//!
//! Zero differences are dropped, tied magnitudes get mid-ranks. Up to
//! [`EXACT_MAX_N`] non-zero pairs the p-value is exact: the null distribution
//! of `W+` is counted over all `2^n` sign assignments by dynamic programming
//! on doubled ranks (mid-ranks are multiples of ½, so doubled ranks are
//! integers). Above that a normal approximation with tie-corrected variance
//! and continuity correction is used.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub n_effective: usize,
    pub p: f64,
    pub method: Method,
}

/// Non-zero differences and the mid-ranks of their magnitudes.
pub fn signed_ranks(x: &[f64], y: &[f64]) -> Result<Vec<(f64, f64)>> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "paired samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Param("paired test needs at least one pair".into()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if let Some(d) = diffs.iter().find(|d| !d.is_finite()) {
        return Err(Error::Numeric(format!("non-finite paired difference {d}")));
    }
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    let mut ranks = vec![0.0; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // positions i..=j share the mean of ranks i+1..=j+1
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    Ok(diffs.into_iter().zip(ranks).collect())
}

/// Sizes of tie groups among the ranks.
fn tie_groups(ranked: &[(f64, f64)]) -> Vec<usize> {
    let mut r: Vec<f64> = ranked.iter().map(|&(_, r)| r).collect();
    r.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < r.len() {
        let mut j = i;
        while j + 1 < r.len() && r[j + 1] == r[i] {
            j += 1;
        }
        groups.push(j - i + 1);
        i = j + 1;
    }
    groups
}

fn rank_sums(ranked: &[(f64, f64)]) -> (f64, f64) {
    ranked.iter().fold((0.0, 0.0), |(p, m), &(d, r)| {
        if d > 0.0 {
            (p + r, m)
        } else {
            (p, m + r)
        }
    })
}

/// Exact two-sided p-value `min(1, 2·P(W+ ≤ w))` under the null.
pub fn exact_p(ranked: &[(f64, f64)], w: f64) -> f64 {
    let doubled: Vec<usize> = ranked.iter().map(|&(_, r)| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    // counts[s] = number of sign assignments with doubled W+ == s
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let limit = (2.0 * w).round() as usize;
    let below: f64 = counts[..=limit.min(total)].iter().sum();
    let all = 2f64.powi(ranked.len() as i32);
    (2.0 * below / all).min(1.0)
}

/// Normal approximation with tie correction and continuity correction.
pub fn normal_approx_p(ranked: &[(f64, f64)], w: f64) -> f64 {
    let n = ranked.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let ties: f64 = tie_groups(ranked)
        .into_iter()
        .map(|t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    // 2 * (1 - Φ(z))
    erfc(z / std::f64::consts::SQRT_2).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Two-sided paired signed-rank test of `x` against `y`.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    let ranked = signed_ranks(x, y)?;
    let n = ranked.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            n_effective: 0,
            p: 1.0,
            method: Method::Exact,
        });
    }
    let (w_plus, w_minus) = rank_sums(&ranked);
    let w = w_plus.min(w_minus);
    let (p, method) = if n <= EXACT_MAX_N {
        (exact_p(&ranked, w), Method::Exact)
    } else {
        (normal_approx_p(&ranked, w), Method::NormalApprox)
    };
    Ok(WilcoxonResult {
        w,
        w_plus,
        w_minus,
        n_effective: n,
        p: p.clamp(f64::MIN_POSITIVE, 1.0),
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((r.p, r.n_effective, r.method), (1.0, 0, Method::Exact));
    }

    #[test]
    fn three_positive_differences() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.w, 0.0);
        assert_eq!(r.p, 0.25);
    }

    #[test]
    fn mid_ranks_for_ties() {
        let ranked = signed_ranks(&[1.0, -1.0, 3.0, 0.0], &[0.0; 4]).unwrap();
        let ranks: Vec<f64> = ranked.iter().map(|r| r.1).collect();
        assert_eq!(ranks, vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(matches!(
            wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn large_n_uses_normal_approximation() {
        let x: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let y = vec![0.0; 30];
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.method, Method::NormalApprox);
        assert!(r.p > 0.0 && r.p < 1e-5);
    }
}
