//! Permutation test over direction verdicts.
//!
//! The null is independent fair sign flips: with no real association,
//! each comparison is equally likely to land on either direction, so
//! the correct count is Binomial(n, 1/2). Each replicate redraws all n
//! labels and the p-value is the proportion of replicates whose
//! correct count reaches the observed one.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub fn permutation_test(verdicts: &[bool], n_perm: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    if verdicts.is_empty() {
        return Err(Error::Stats("permutation test requires at least one verdict".into()));
    }
    if n_perm == 0 {
        return Err(Error::Stats("permutation test requires n_perm >= 1".into()));
    }
    let n = verdicts.len();
    let observed = verdicts.iter().filter(|v| **v).count();
    let mut at_least = 0usize;
    for _ in 0..n_perm {
        let correct = (0..n).filter(|_| rand::Rng::gen::<bool>(rng)).count();
        if correct >= observed {
            at_least += 1;
        }
    }
    Ok(at_least as f64 / n_perm as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_at, stream};

    fn verdicts(correct: usize, n: usize) -> Vec<bool> {
        (0..n).map(|i| i < correct).collect()
    }

    /// Exact binomial tail P(X >= k) for X ~ Binomial(n, 1/2).
    fn binom_tail(k: usize, n: usize) -> f64 {
        let mut num = 0.0f64;
        for j in k..=n {
            let mut c = 1.0f64;
            for i in 0..j {
                c = c * (n - i) as f64 / (i + 1) as f64;
            }
            num += c;
        }
        num / 2.0f64.powi(n as i32)
    }

    fn mc_tolerance(p: f64, n_perm: usize) -> f64 {
        3.0 * (p * (1.0 - p) / n_perm as f64).sqrt()
    }

    #[test]
    fn twenty_of_twenty_six_matches_the_exact_binomial_tail() {
        let mut rng = rng_at(17, &[stream::PERMUTATION, 0]);
        let p = permutation_test(&verdicts(20, 26), 100_000, &mut rng).unwrap();
        // 313912 of the 2^26 label assignments reach 20 correct.
        let exact = 313_912.0 / 67_108_864.0;
        assert!((exact - binom_tail(20, 26)).abs() < 1e-12);
        assert!(
            (p - exact).abs() < mc_tolerance(exact, 100_000),
            "p={p} exact={exact}"
        );
    }

    #[test]
    fn all_correct_is_the_analytic_extreme() {
        let mut rng = rng_at(19, &[stream::PERMUTATION, 1]);
        let p = permutation_test(&verdicts(10, 10), 200_000, &mut rng).unwrap();
        let exact = 0.5f64.powi(10);
        assert!((p - exact).abs() < mc_tolerance(exact, 200_000) + 1e-4);
    }

    #[test]
    fn half_correct_sits_at_the_binomial_median() {
        let mut rng = rng_at(23, &[stream::PERMUTATION, 2]);
        let p = permutation_test(&verdicts(13, 26), 100_000, &mut rng).unwrap();
        let exact = binom_tail(13, 26);
        assert!((p - exact).abs() < mc_tolerance(exact, 100_000));
        assert!(p > 0.5 && p < 0.65, "p={p}");
    }

    #[test]
    fn p_is_monotone_non_increasing_in_the_observed_count() {
        let mut last = f64::INFINITY;
        for correct in 10..=20 {
            // Re-seeding per threshold shares the replicate draws, so
            // monotonicity must hold exactly, not just in expectation.
            let mut rng = rng_at(29, &[stream::PERMUTATION, 3]);
            let p = permutation_test(&verdicts(correct, 26), 20_000, &mut rng).unwrap();
            assert!(p <= last, "p rose from {last} to {p} at {correct}");
            last = p;
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let mut rng = rng_at(31, &[stream::PERMUTATION, 4]);
        assert!(permutation_test(&[], 100, &mut rng).is_err());
        assert!(permutation_test(&[true], 0, &mut rng).is_err());
    }
}
