//! Wilcoxon signed-rank test for paired differences.
//!
//! Conventions: zero differences are dropped, tied magnitudes get
//! mid-ranks, the exact null distribution is enumerated for n <= 25
//! (via a subset-sum recurrence over doubled ranks, which are integers
//! even with mid-ranks), and larger n uses the normal approximation
//! with a tie correction and a continuity correction.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest zeros-excluded n handled by exact enumeration.
const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Sum of ranks of negative differences.
    pub w_minus: f64,
    pub p: f64,
    /// Differences remaining after zeros are dropped.
    pub n_used: usize,
    /// True when every difference was zero (p reported as 1).
    pub degenerate: bool,
    /// True when the exact enumeration was used rather than the
    /// normal approximation.
    pub exact: bool,
}

/// Mid-ranks of |diffs|, with ranks doubled so ties stay integral.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let n = abs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs[a].partial_cmp(&abs[b]).unwrap());
    let mut out = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share ranks i+1..=j+1; the doubled
        // mid-rank is their doubled sum over the count: (i+1)+(j+1).
        let doubled_mid = (i + 1 + j + 1) as u64;
        for &idx in &order[i..=j] {
            out[idx] = doubled_mid;
        }
        i = j + 1;
    }
    out
}

/// Number of sign assignments reaching each doubled W+ value.
///
/// `counts[s]` is the number of subsets of `ranks2` summing to `s`.
/// Total across all s is 2^n, which stays exactly representable in
/// f64 for the n <= 25 regime this serves.
fn subset_sum_counts(ranks2: &[u64]) -> Vec<f64> {
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        reach += r;
        for s in (r..=reach).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

fn exact_two_sided_p(ranks2: &[u64], w_plus2: u64) -> f64 {
    let counts = subset_sum_counts(ranks2);
    let total: f64 = 2.0f64.powi(ranks2.len() as i32);
    let lo: f64 = counts[..=w_plus2 as usize].iter().sum();
    let hi: f64 = counts[w_plus2 as usize..].iter().sum();
    (2.0 * (lo.min(hi)) / total).min(1.0)
}

fn approx_two_sided_p(ranks2: &[u64], w_plus2: u64) -> f64 {
    let n = ranks2.len() as f64;
    let w_plus = w_plus2 as f64 / 2.0;
    let mean = n * (n + 1.0) / 4.0;
    // Tie correction subtracts sum(t^3 - t)/48 over tie groups.
    let mut tie_term = 0.0;
    let mut sorted = ranks2.to_vec();
    sorted.sort_unstable();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let diff = w_plus - mean;
    // Continuity correction pulls the statistic half a step toward
    // the mean before standardizing.
    let z = (diff.abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    (2.0 * (1.0 - normal.cdf(z))).min(1.0)
}

/// Two-sided Wilcoxon signed-rank test on paired differences.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.is_empty() {
        return Err(Error::Stats("wilcoxon requires at least one difference".into()));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Stats("wilcoxon requires finite differences".into()));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    if nonzero.is_empty() {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            w_minus: 0.0,
            p: 1.0,
            n_used: 0,
            degenerate: true,
            exact: true,
        });
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks2 = doubled_ranks(&abs);
    let w_plus2: u64 = nonzero
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let total2: u64 = ranks2.iter().sum();
    let n = nonzero.len();
    let exact = n <= EXACT_MAX_N;
    let p = if exact {
        exact_two_sided_p(&ranks2, w_plus2)
    } else {
        approx_two_sided_p(&ranks2, w_plus2)
    };
    Ok(WilcoxonResult {
        w_plus: w_plus2 as f64 / 2.0,
        w_minus: (total2 - w_plus2) as f64 / 2.0,
        p,
        n_used: n,
        degenerate: false,
        exact,
    })
}
