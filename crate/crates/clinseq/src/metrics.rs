//! Trajectory-fidelity metrics: type Jaccard, mode collapse, timing
//! calibration, category-transition distances, follow-up rates,
//! per-patient longitudinal comparison, and the nearest-neighbour
//! memorisation check.
//!
//! All functions are pure over immutable token/time pools. Anything
//! parallel reduces in a fixed order, so reports are deterministic.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::vocab::{TokenFamily, TokenId, Vocabulary};

/// A run of this many identical consecutive tokens counts as mode
/// collapse.
pub const MODE_COLLAPSE_RUN: usize = 20;
/// Histogram resolution for the log-space Bhattacharyya coefficient.
pub const BC_BINS: usize = 64;

/// Event categories: every token family except the structural specials.
pub const EVENT_FAMILIES: [TokenFamily; 7] = [
    TokenFamily::Age,
    TokenFamily::Sex,
    TokenFamily::Smoke,
    TokenFamily::Lab,
    TokenFamily::Vital,
    TokenFamily::Med,
    TokenFamily::Dx,
];

pub const FAMILY_LABELS: [&str; 7] = ["AGE", "SEX", "SMOKE", "LAB", "VITAL", "MED", "DX"];

pub fn family_index(f: TokenFamily) -> Option<usize> {
    EVENT_FAMILIES.iter().position(|&g| g == f)
}

// ---------------------------------------------------------------------------
// type presence and runs

fn token_set(pool: &[&[TokenId]]) -> BTreeSet<TokenId> {
    pool.iter().flat_map(|s| s.iter().copied()).collect()
}

pub fn set_jaccard(a: &BTreeSet<TokenId>, b: &BTreeSet<TokenId>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Jaccard similarity between the sets of token types present anywhere
/// in each pool.
pub fn type_jaccard_pooled(gen: &[&[TokenId]], reference: &[&[TokenId]]) -> Result<f64> {
    if gen.is_empty() || reference.is_empty() {
        return Err(Error::Stats("type_jaccard needs two non-empty pools".into()));
    }
    Ok(set_jaccard(&token_set(gen), &token_set(reference)))
}

/// Mean per-pair token-set Jaccard over aligned (generated, reference)
/// pairs.
pub fn type_jaccard_per_patient(pairs: &[(&[TokenId], &[TokenId])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Stats("type_jaccard needs at least one pair".into()));
    }
    let sum: f64 = pairs
        .iter()
        .map(|(g, r)| {
            let a: BTreeSet<TokenId> = g.iter().copied().collect();
            let b: BTreeSet<TokenId> = r.iter().copied().collect();
            set_jaccard(&a, &b)
        })
        .sum();
    Ok(sum / pairs.len() as f64)
}

pub fn longest_run(tokens: &[TokenId]) -> usize {
    let mut best = 0;
    let mut cur = 0;
    let mut prev: Option<TokenId> = None;
    for &t in tokens {
        cur = if prev == Some(t) { cur + 1 } else { 1 };
        best = best.max(cur);
        prev = Some(t);
    }
    best
}

/// Fraction of pools containing a run of at least [`MODE_COLLAPSE_RUN`]
/// identical tokens.
pub fn mode_collapse_rate(pools: &[&[TokenId]]) -> f64 {
    if pools.is_empty() {
        return 0.0;
    }
    let hits = pools
        .iter()
        .filter(|p| longest_run(p) >= MODE_COLLAPSE_RUN)
        .count();
    hits as f64 / pools.len() as f64
}

// ---------------------------------------------------------------------------
// timing

/// Exact two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|p, q| p.total_cmp(q));
    xb.sort_by(|p, q| p.total_cmp(q));
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d.max((1.0 - i as f64 / na).max(1.0 - j as f64 / nb))
}

/// Bhattacharyya coefficient between two normalized histograms.
pub fn bhattacharyya_from_hists(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| (a * b).sqrt()).sum()
}

fn log_histogram(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut h = vec![0.0; BC_BINS];
    let width = (hi - lo).max(f64::MIN_POSITIVE);
    for &v in values {
        let x = v.log10();
        let mut bin = ((x - lo) / width * BC_BINS as f64) as usize;
        if bin >= BC_BINS {
            bin = BC_BINS - 1;
        }
        h[bin] += 1.0;
    }
    let total: f64 = h.iter().sum();
    if total > 0.0 {
        for c in &mut h {
            *c /= total;
        }
    }
    h
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingCalibration {
    pub zero_frac_gen: f64,
    pub zero_frac_ref: f64,
    /// Medians and means are over strictly positive gaps.
    pub median_gen: Option<f64>,
    pub median_ref: Option<f64>,
    pub mean_gen: Option<f64>,
    pub mean_ref: Option<f64>,
    /// KS on positive gaps; absent when either pool has none.
    pub ks: Option<f64>,
    /// Bhattacharyya coefficient over shared log10 histograms of the
    /// positive gaps; absent when either pool has none.
    pub bhattacharyya: Option<f64>,
}

fn median_of(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn timing_calibration(gen_dts: &[f64], ref_dts: &[f64]) -> Result<TimingCalibration> {
    if gen_dts.is_empty() || ref_dts.is_empty() {
        return Err(Error::Stats("timing_calibration needs non-empty pools".into()));
    }
    let zero_frac = |xs: &[f64]| xs.iter().filter(|&&x| x == 0.0).count() as f64 / xs.len() as f64;
    let mut gp: Vec<f64> = gen_dts.iter().copied().filter(|&x| x > 0.0).collect();
    let mut rp: Vec<f64> = ref_dts.iter().copied().filter(|&x| x > 0.0).collect();
    gp.sort_by(|a, b| a.total_cmp(b));
    rp.sort_by(|a, b| a.total_cmp(b));
    let stats = |xs: &[f64]| {
        if xs.is_empty() {
            (None, None)
        } else {
            (
                Some(median_of(xs)),
                Some(xs.iter().sum::<f64>() / xs.len() as f64),
            )
        }
    };
    let (median_gen, mean_gen) = stats(&gp);
    let (median_ref, mean_ref) = stats(&rp);
    let (ks, bhattacharyya) = if gp.is_empty() || rp.is_empty() {
        (None, None)
    } else {
        let lo = gp[0].min(rp[0]).log10();
        let hi = gp[gp.len() - 1].max(rp[rp.len() - 1]).log10();
        let hg = log_histogram(&gp, lo, hi);
        let hr = log_histogram(&rp, lo, hi);
        (
            Some(ks_statistic(&gp, &rp)),
            Some(bhattacharyya_from_hists(&hg, &hr)),
        )
    };
    Ok(TimingCalibration {
        zero_frac_gen: zero_frac(gen_dts),
        zero_frac_ref: zero_frac(ref_dts),
        median_gen,
        median_ref,
        mean_gen,
        mean_ref,
        ks,
        bhattacharyya,
    })
}

// ---------------------------------------------------------------------------
// category transitions

#[derive(Debug, Clone, Serialize)]
pub struct CategoryTransitionMatrix {
    pub k: usize,
    /// Raw transition counts, row-major.
    pub counts: Vec<f64>,
    /// Row-normalized; rows without support stay all-zero.
    pub stochastic: Vec<f64>,
}

impl CategoryTransitionMatrix {
    /// Counts transitions between consecutive event-category tokens,
    /// skipping structural specials entirely.
    pub fn from_pools(pools: &[&[TokenId]], vocab: &Vocabulary) -> Self {
        let k = EVENT_FAMILIES.len();
        let mut counts = vec![0.0; k * k];
        for pool in pools {
            let cats: Vec<usize> = pool
                .iter()
                .filter_map(|&t| family_index(vocab.kind(t).family()))
                .collect();
            for w in cats.windows(2) {
                counts[w[0] * k + w[1]] += 1.0;
            }
        }
        let mut stochastic = counts.clone();
        for r in 0..k {
            let row = &mut stochastic[r * k..(r + 1) * k];
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                for c in row {
                    *c /= total;
                }
            }
        }
        CategoryTransitionMatrix {
            k,
            counts,
            stochastic,
        }
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Joint category-bigram distribution: counts normalized to sum 1.
    pub fn joint(&self) -> Vec<f64> {
        let t = self.total();
        if t == 0.0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|c| c / t).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TransitionMetrics {
    pub frobenius: f64,
    pub max_elem: f64,
    /// Jensen-Shannon divergence, base 2, between joint bigram
    /// distributions; always in [0, 1].
    pub jsd: f64,
}

fn entropy_bits(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.log2())
        .sum()
}

pub fn transition_metrics(
    gen: &CategoryTransitionMatrix,
    reference: &CategoryTransitionMatrix,
) -> Result<TransitionMetrics> {
    if gen.k != reference.k {
        return Err(Error::Stats("category sets differ".into()));
    }
    let frobenius = gen
        .stochastic
        .iter()
        .zip(&reference.stochastic)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let max_elem = gen
        .stochastic
        .iter()
        .zip(&reference.stochastic)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let p = gen.joint();
    let q = reference.joint();
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
    let jsd = entropy_bits(&m) - 0.5 * (entropy_bits(&p) + entropy_bits(&q));
    Ok(TransitionMetrics {
        frobenius,
        max_elem,
        jsd: jsd.clamp(0.0, 1.0),
    })
}

/// Among from-category occurrences, the fraction followed by at least
/// one to-category token within the next `k` positions. `None` when the
/// from-category never occurs.
pub fn followup_rate(
    pools: &[&[TokenId]],
    vocab: &Vocabulary,
    from: TokenFamily,
    to: TokenFamily,
    k: usize,
) -> Option<f64> {
    let mut occurrences = 0usize;
    let mut hits = 0usize;
    for pool in pools {
        for (i, &t) in pool.iter().enumerate() {
            if vocab.kind(t).family() != from {
                continue;
            }
            occurrences += 1;
            let end = (i + 1 + k).min(pool.len());
            if pool[i + 1..end]
                .iter()
                .any(|&u| vocab.kind(u).family() == to)
            {
                hits += 1;
            }
        }
    }
    if occurrences == 0 {
        None
    } else {
        Some(hits as f64 / occurrences as f64)
    }
}

// ---------------------------------------------------------------------------
// longitudinal per-patient comparison

#[derive(Debug, Clone, Serialize)]
pub struct LongitudinalRecord {
    pub patient_id: u64,
    pub token_jaccard: f64,
    pub category_cosine: f64,
    pub measure_jaccard: f64,
    /// Mean |per-measure mean quintile difference| over shared measures;
    /// absent when the continuations share no measure.
    pub quintile_diff: Option<f64>,
    pub elapsed_gen: f64,
    pub elapsed_ref: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LongitudinalSummary {
    pub records: Vec<LongitudinalRecord>,
    pub token_jaccard_mean: f64,
    pub token_jaccard_sd: f64,
    pub category_cosine_mean: f64,
    pub measure_jaccard_mean: f64,
    pub quintile_diff_mean: Option<f64>,
    pub n_quintile_excluded: usize,
    pub median_elapsed_gen: f64,
    pub median_elapsed_ref: f64,
}

fn category_counts(tokens: &[TokenId], vocab: &Vocabulary) -> Vec<f64> {
    let mut v = vec![0.0; EVENT_FAMILIES.len()];
    for &t in tokens {
        if let Some(i) = family_index(vocab.kind(t).family()) {
            v[i] += 1.0;
        }
    }
    v
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-measure mean quintiles of every LAB/VITAL token present.
fn measure_means(tokens: &[TokenId], vocab: &Vocabulary) -> Vec<(String, f64)> {
    let mut acc: std::collections::BTreeMap<String, (f64, f64)> = Default::default();
    for &t in tokens {
        let kind = vocab.kind(t);
        if let (Some(m), Some(b)) = (kind.measure_key(), kind.ordinal_bin()) {
            let e = acc.entry(m).or_insert((0.0, 0.0));
            e.0 += b as f64;
            e.1 += 1.0;
        }
    }
    acc.into_iter().map(|(m, (s, n))| (m, s / n)).collect()
}

/// Compares each patient's generated continuation against the held-out
/// true continuation.
pub fn longitudinal_fidelity(
    pairs: &[(u64, (&[TokenId], &[f64]), (&[TokenId], &[f64]))],
    vocab: &Vocabulary,
) -> Result<LongitudinalSummary> {
    if pairs.is_empty() {
        return Err(Error::Stats("longitudinal_fidelity needs pairs".into()));
    }
    let mut records = Vec::with_capacity(pairs.len());
    for &(pid, (gt, gd), (rt, rd)) in pairs {
        if gt.is_empty() || rt.is_empty() {
            return Err(Error::Stats(format!(
                "patient {pid} has an empty continuation"
            )));
        }
        let ga: BTreeSet<TokenId> = gt.iter().copied().collect();
        let ra: BTreeSet<TokenId> = rt.iter().copied().collect();
        let gm = measure_means(gt, vocab);
        let rm = measure_means(rt, vocab);
        let gset: BTreeSet<&String> = gm.iter().map(|(m, _)| m).collect();
        let rset: BTreeSet<&String> = rm.iter().map(|(m, _)| m).collect();
        let shared: Vec<&String> = gset.intersection(&rset).copied().collect();
        let quintile_diff = if shared.is_empty() {
            None
        } else {
            let total: f64 = shared
                .iter()
                .map(|m| {
                    let g = gm.iter().find(|(x, _)| x == *m).unwrap().1;
                    let r = rm.iter().find(|(x, _)| x == *m).unwrap().1;
                    (g - r).abs()
                })
                .sum();
            Some(total / shared.len() as f64)
        };
        let union = gset.union(&rset).count();
        let measure_jaccard = if union == 0 {
            1.0
        } else {
            shared.len() as f64 / union as f64
        };
        records.push(LongitudinalRecord {
            patient_id: pid,
            token_jaccard: set_jaccard(&ga, &ra),
            category_cosine: cosine(&category_counts(gt, vocab), &category_counts(rt, vocab)),
            measure_jaccard,
            quintile_diff,
            elapsed_gen: gd.iter().sum(),
            elapsed_ref: rd.iter().sum(),
        });
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let tj: Vec<f64> = records.iter().map(|r| r.token_jaccard).collect();
    let tj_mean = mean(&tj);
    let tj_sd = (tj.iter().map(|x| (x - tj_mean).powi(2)).sum::<f64>()
        / tj.len().max(1) as f64)
        .sqrt();
    let qd: Vec<f64> = records.iter().filter_map(|r| r.quintile_diff).collect();
    let mut eg: Vec<f64> = records.iter().map(|r| r.elapsed_gen).collect();
    let mut er: Vec<f64> = records.iter().map(|r| r.elapsed_ref).collect();
    eg.sort_by(|a, b| a.total_cmp(b));
    er.sort_by(|a, b| a.total_cmp(b));
    Ok(LongitudinalSummary {
        token_jaccard_mean: tj_mean,
        token_jaccard_sd: tj_sd,
        category_cosine_mean: mean(
            &records.iter().map(|r| r.category_cosine).collect::<Vec<_>>(),
        ),
        measure_jaccard_mean: mean(
            &records.iter().map(|r| r.measure_jaccard).collect::<Vec<_>>(),
        ),
        quintile_diff_mean: if qd.is_empty() { None } else { Some(mean(&qd)) },
        n_quintile_excluded: records.len() - qd.len(),
        median_elapsed_gen: median_of(&eg),
        median_elapsed_ref: median_of(&er),
        records,
    })
}

// ---------------------------------------------------------------------------
// memorisation

#[derive(Debug, Clone, Serialize)]
pub struct MemorisationReport {
    /// Mean over generated sequences of the max Jaccard against the
    /// training sample.
    pub mean_nn_jaccard: f64,
    pub max_nn_jaccard: f64,
    /// Mean token-set Jaccard over random training pairs.
    pub random_pair_baseline: f64,
    pub n_generated: usize,
    pub n_training: usize,
}

pub fn nn_memorisation(
    generated: &[&[TokenId]],
    training: &[&[TokenId]],
    rng: &mut ChaCha8Rng,
) -> Result<MemorisationReport> {
    if training.is_empty() || generated.is_empty() {
        return Err(Error::Stats("nn_memorisation needs non-empty pools".into()));
    }
    let train_sets: Vec<BTreeSet<TokenId>> = training
        .iter()
        .map(|s| s.iter().copied().collect())
        .collect();
    let nearest: Vec<f64> = generated
        .par_iter()
        .map(|g| {
            let gs: BTreeSet<TokenId> = g.iter().copied().collect();
            train_sets
                .iter()
                .map(|t| set_jaccard(&gs, t))
                .fold(0.0, f64::max)
        })
        .collect();
    let mean_nn = nearest.iter().sum::<f64>() / nearest.len() as f64;
    let max_nn = nearest.iter().copied().fold(0.0, f64::max);
    let n_pairs = 1000.min(training.len() * (training.len().saturating_sub(1)) / 2).max(1);
    let mut baseline = 0.0;
    for _ in 0..n_pairs {
        let i = rng.gen_range(0..train_sets.len());
        let j = if train_sets.len() == 1 {
            i
        } else {
            let mut j = rng.gen_range(0..train_sets.len() - 1);
            if j >= i {
                j += 1;
            }
            j
        };
        baseline += set_jaccard(&train_sets[i], &train_sets[j]);
    }
    Ok(MemorisationReport {
        mean_nn_jaccard: mean_nn,
        max_nn_jaccard: max_nn,
        random_pair_baseline: baseline / n_pairs as f64,
        n_generated: generated.len(),
        n_training: training.len(),
    })
}

// ---------------------------------------------------------------------------
// report assembly

#[derive(Debug, Clone, Serialize)]
pub struct FidelityReport {
    pub type_jaccard_pooled: f64,
    pub type_jaccard_per_patient: Option<f64>,
    pub mode_collapse_rate: f64,
    pub timing: TimingCalibration,
    pub transitions: TransitionMetrics,
    pub med_lab_followup_gen: Option<f64>,
    pub med_lab_followup_ref: Option<f64>,
    pub model_ppl: Option<f64>,
    pub unigram_ppl: Option<f64>,
    pub bigram_ppl: Option<f64>,
    pub n_generated: usize,
    pub n_reference: usize,
}

/// Computes the pooled fidelity metrics of a generated pool against a
/// reference pool. Perplexity fields start empty; the caller fills the
/// ones it evaluated.
pub fn fidelity_report(
    gen_tokens: &[&[TokenId]],
    gen_dts: &[f64],
    ref_tokens: &[&[TokenId]],
    ref_dts: &[f64],
    vocab: &Vocabulary,
) -> Result<FidelityReport> {
    let gen_m = CategoryTransitionMatrix::from_pools(gen_tokens, vocab);
    let ref_m = CategoryTransitionMatrix::from_pools(ref_tokens, vocab);
    Ok(FidelityReport {
        type_jaccard_pooled: type_jaccard_pooled(gen_tokens, ref_tokens)?,
        type_jaccard_per_patient: None,
        mode_collapse_rate: mode_collapse_rate(gen_tokens),
        timing: timing_calibration(gen_dts, ref_dts)?,
        transitions: transition_metrics(&gen_m, &ref_m)?,
        med_lab_followup_gen: followup_rate(gen_tokens, vocab, TokenFamily::Med, TokenFamily::Lab, 5),
        med_lab_followup_ref: followup_rate(ref_tokens, vocab, TokenFamily::Med, TokenFamily::Lab, 5),
        model_ppl: None,
        unigram_ppl: None,
        bigram_ppl: None,
        n_generated: gen_tokens.len(),
        n_reference: ref_tokens.len(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Plain-text table of the report, one aligned row per metric.
pub fn render_table(r: &FidelityReport) -> String {
    let rows: Vec<(String, String)> = vec![
        ("Type Jaccard (pooled)".into(), format!("{:.4}", r.type_jaccard_pooled)),
        ("Type Jaccard (per patient)".into(), fmt_opt(r.type_jaccard_per_patient)),
        ("Mode collapse rate".into(), format!("{:.4}", r.mode_collapse_rate)),
        (
            "Zero-fraction (gen / ref)".into(),
            format!("{:.4} / {:.4}", r.timing.zero_frac_gen, r.timing.zero_frac_ref),
        ),
        (
            "Median positive gap (gen / ref)".into(),
            format!("{} / {}", fmt_opt(r.timing.median_gen), fmt_opt(r.timing.median_ref)),
        ),
        ("KS statistic (non-zero times)".into(), fmt_opt(r.timing.ks)),
        ("Bhattacharyya (log-space)".into(), fmt_opt(r.timing.bhattacharyya)),
        ("Transition Frobenius".into(), format!("{:.4}", r.transitions.frobenius)),
        ("Transition max element".into(), format!("{:.4}", r.transitions.max_elem)),
        ("Transition JSD (base 2)".into(), format!("{:.4}", r.transitions.jsd)),
        (
            "MED->LAB within 5 (gen / ref)".into(),
            format!(
                "{} / {}",
                fmt_opt(r.med_lab_followup_gen),
                fmt_opt(r.med_lab_followup_ref)
            ),
        ),
        ("Model perplexity".into(), fmt_opt(r.model_ppl)),
        ("Unigram perplexity".into(), fmt_opt(r.unigram_ppl)),
        ("Bigram perplexity".into(), fmt_opt(r.bigram_ppl)),
    ];
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        out.push_str(&format!("{k:<width$}  {v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_at;
    use crate::vocab::{build_vocabulary, VocabRecipe, BOS, EOS};

    fn vocab() -> Vocabulary {
        build_vocabulary(&VocabRecipe {
            lab_measures: vec!["A1C".into(), "LDL".into()],
            vital_measures: vec!["SBP".into()],
            med_classes: vec!["STATIN".into()],
            med_drugs: vec![],
            dx_codes: vec!["E11".into()],
            sexes: vec!["F".into()],
            smoke_levels: vec!["NEVER".into()],
        })
        .unwrap()
    }

    fn ids(vocab: &Vocabulary, toks: &[&str]) -> Vec<TokenId> {
        toks.iter().map(|t| vocab.id(t).unwrap()).collect()
    }

    #[test]
    fn type_jaccard_set_arithmetic() {
        let v = vocab();
        let a = ids(&v, &["LAB:A1C:Q1", "LAB:A1C:Q2", "LAB:A1C:Q3"]);
        let b = ids(&v, &["LAB:A1C:Q2", "LAB:A1C:Q3", "LAB:A1C:Q4"]);
        // {x,y,z} vs {y,z,w}: 2 shared of 4 total.
        assert_eq!(type_jaccard_pooled(&[&a], &[&b]).unwrap(), 0.5);
        assert_eq!(type_jaccard_pooled(&[&a], &[&a]).unwrap(), 1.0);
        let c = ids(&v, &["DX:E11"]);
        assert_eq!(type_jaccard_pooled(&[&a], &[&c]).unwrap(), 0.0);
        assert!(type_jaccard_pooled(&[], &[&a]).is_err());
        // Self-Jaccard of any pool is 1.
        let pool: Vec<&[TokenId]> = vec![&a, &b, &c];
        assert_eq!(type_jaccard_pooled(&pool, &pool).unwrap(), 1.0);
    }

    #[test]
    fn mode_collapse_boundary_is_twenty() {
        let v = vocab();
        let dx = v.id("DX:E11").unwrap();
        let lab = v.id("LAB:A1C:Q1").unwrap();
        let run20: Vec<TokenId> = std::iter::repeat(dx).take(20).collect();
        let mut run19: Vec<TokenId> = std::iter::repeat(dx).take(19).collect();
        run19.push(lab);
        run19.extend(std::iter::repeat(dx).take(19));
        let alternating: Vec<TokenId> = (0..40)
            .map(|i| if i % 2 == 0 { dx } else { lab })
            .collect();
        assert_eq!(longest_run(&run20), 20);
        assert_eq!(longest_run(&run19), 19);
        assert_eq!(mode_collapse_rate(&[&run20]), 1.0);
        assert_eq!(mode_collapse_rate(&[&run19]), 0.0);
        assert_eq!(mode_collapse_rate(&[&alternating]), 0.0);
        assert_eq!(mode_collapse_rate(&[&run20, &run19]), 0.5);
    }

    #[test]
    fn timing_identical_and_disjoint_pools() {
        let a = [0.0, 1.0, 2.0, 3.0];
        let t = timing_calibration(&a, &a).unwrap();
        assert_eq!(t.ks, Some(0.0));
        assert!((t.bhattacharyya.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(t.zero_frac_gen, 0.25);

        let g = [1.0, 2.0, 3.0];
        let r = [400.0, 500.0, 600.0];
        let t = timing_calibration(&g, &r).unwrap();
        assert_eq!(t.ks, Some(1.0));
        assert_eq!(t.bhattacharyya, Some(0.0));

        // A pool with no positive gaps leaves KS/BC undefined.
        let t = timing_calibration(&[0.0, 0.0], &[1.0]).unwrap();
        assert_eq!(t.ks, None);
        assert_eq!(t.bhattacharyya, None);
        assert_eq!(t.zero_frac_gen, 1.0);
    }

    #[test]
    fn bhattacharyya_analytic_case() {
        // [.5,.5,0] vs [0,.5,.5]: only the middle bin overlaps.
        let bc = bhattacharyya_from_hists(&[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5]);
        assert!((bc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ks_matches_hand_computation() {
        // F_a jumps at 1,2; F_b at 1.5,2.5. Max gap 0.5 at x in [1,1.5).
        let d = ks_statistic(&[1.0, 2.0], &[1.5, 2.5]);
        assert!((d - 0.5).abs() < 1e-12);
        // Symmetry.
        assert_eq!(d, ks_statistic(&[1.5, 2.5], &[1.0, 2.0]));
    }

    #[test]
    fn transition_oracles() {
        let v = vocab();
        // LAB DX LAB DX ... gives joint mass on (Lab,Dx) and (Dx,Lab).
        let a = ids(&v, &["LAB:A1C:Q1", "DX:E11", "LAB:A1C:Q1", "DX:E11"]);
        // MED VITAL MED VITAL: disjoint joint support from `a`.
        let b = ids(&v, &["MED:STATIN", "VITAL:SBP:Q1", "MED:STATIN", "VITAL:SBP:Q1"]);
        let ma = CategoryTransitionMatrix::from_pools(&[&a], &v);
        let mb = CategoryTransitionMatrix::from_pools(&[&b], &v);
        let same = transition_metrics(&ma, &ma).unwrap();
        assert_eq!(same.frobenius, 0.0);
        assert_eq!(same.max_elem, 0.0);
        assert_eq!(same.jsd, 0.0);
        let diff = transition_metrics(&ma, &mb).unwrap();
        assert!((diff.jsd - 1.0).abs() < 1e-12, "disjoint supports: {}", diff.jsd);

        // Hand 2x2 check inside the 7x7 frame: rows [1,0;0,1] vs
        // [0,1;1,0] have Frobenius sqrt(4) = 2.
        let lab = family_index(TokenFamily::Lab).unwrap();
        let dx = family_index(TokenFamily::Dx).unwrap();
        let k = EVENT_FAMILIES.len();
        let mut s1 = vec![0.0; k * k];
        let mut s2 = vec![0.0; k * k];
        s1[lab * k + lab] = 1.0;
        s1[dx * k + dx] = 1.0;
        s2[lab * k + dx] = 1.0;
        s2[dx * k + lab] = 1.0;
        let m1 = CategoryTransitionMatrix { k, counts: s1.clone(), stochastic: s1 };
        let m2 = CategoryTransitionMatrix { k, counts: s2.clone(), stochastic: s2 };
        let t = transition_metrics(&m1, &m2).unwrap();
        assert!((t.frobenius - 2.0).abs() < 1e-12);
        assert_eq!(t.max_elem, 1.0);
    }

    #[test]
    fn followup_rate_boundaries_and_brute_force() {
        let v = vocab();
        let med_lab = ids(&v, &["MED:STATIN", "LAB:A1C:Q1"]);
        assert_eq!(
            followup_rate(&[&med_lab], &v, TokenFamily::Med, TokenFamily::Lab, 5),
            Some(1.0)
        );
        let med_far = ids(
            &v,
            &["MED:STATIN", "DX:E11", "DX:E11", "DX:E11", "DX:E11", "DX:E11", "LAB:A1C:Q1"],
        );
        assert_eq!(
            followup_rate(&[&med_far], &v, TokenFamily::Med, TokenFamily::Lab, 5),
            Some(0.0)
        );
        assert_eq!(
            followup_rate(&[&med_lab], &v, TokenFamily::Age, TokenFamily::Lab, 5),
            None
        );

        // Hand-built sequence vs exhaustive scan.
        let seq = ids(
            &v,
            &[
                "MED:STATIN", "DX:E11", "LAB:A1C:Q2", "MED:STATIN", "DX:E11", "DX:E11",
                "MED:STATIN", "VITAL:SBP:Q3", "LAB:LDL:Q4", "DX:E11",
            ],
        );
        for k in 1..=6 {
            let got = followup_rate(&[&seq], &v, TokenFamily::Med, TokenFamily::Lab, k).unwrap();
            let mut occ = 0;
            let mut hit = 0;
            for i in 0..seq.len() {
                if v.kind(seq[i]).family() == TokenFamily::Med {
                    occ += 1;
                    let end = (i + 1 + k).min(seq.len());
                    if (i + 1..end).any(|j| v.kind(seq[j]).family() == TokenFamily::Lab) {
                        hit += 1;
                    }
                }
            }
            assert_eq!(got, hit as f64 / occ as f64, "k={k}");
        }
    }

    #[test]
    fn longitudinal_identical_and_orthogonal() {
        let v = vocab();
        let g = ids(&v, &["LAB:A1C:Q2", "MED:STATIN", "LAB:A1C:Q2"]);
        let d = [1.0, 2.0, 3.0];
        let s = longitudinal_fidelity(&[(1, (&g, &d), (&g, &d))], &v).unwrap();
        let r = &s.records[0];
        assert_eq!(r.token_jaccard, 1.0);
        assert!((r.category_cosine - 1.0).abs() < 1e-12);
        assert_eq!(r.measure_jaccard, 1.0);
        assert_eq!(r.quintile_diff, Some(0.0));
        assert_eq!(r.elapsed_gen, r.elapsed_ref);

        // Orthogonal category vectors.
        let a = ids(&v, &["DX:E11"]);
        let b = ids(&v, &["MED:STATIN"]);
        let s = longitudinal_fidelity(&[(2, (&a, &d[..1]), (&b, &d[..1]))], &v).unwrap();
        assert_eq!(s.records[0].category_cosine, 0.0);
        assert_eq!(s.records[0].quintile_diff, None);
        assert_eq!(s.n_quintile_excluded, 1);

        // Shared measure, per-measure means: gen {2,2} vs ref {4} -> 2.
        let g = ids(&v, &["LAB:A1C:Q2", "LAB:A1C:Q2"]);
        let r = ids(&v, &["LAB:A1C:Q4"]);
        let s = longitudinal_fidelity(&[(3, (&g, &d[..2]), (&r, &d[..1]))], &v).unwrap();
        assert_eq!(s.records[0].quintile_diff, Some(2.0));
    }

    #[test]
    fn memorisation_copy_disjoint_and_brute_force() {
        let v = vocab();
        let t1 = ids(&v, &["LAB:A1C:Q1", "DX:E11"]);
        let t2 = ids(&v, &["MED:STATIN", "VITAL:SBP:Q2"]);
        let t3 = ids(&v, &["LAB:LDL:Q3", "DX:E11", "LAB:A1C:Q1"]);
        let train: Vec<&[TokenId]> = vec![&t1, &t2, &t3];

        // Copied sequence: max 1.0.
        let copy = t1.clone();
        let rep = nn_memorisation(&[&copy], &train, &mut rng_at(1, &[0])).unwrap();
        assert_eq!(rep.max_nn_jaccard, 1.0);

        // Disjoint vocabularies: 0.0.
        let other = ids(&v, &["SMOKE:NEVER"]);
        let rep = nn_memorisation(&[&other], &train, &mut rng_at(1, &[0])).unwrap();
        assert_eq!(rep.max_nn_jaccard, 0.0);

        // Five tiny sequences vs an exhaustive scan.
        let g1 = ids(&v, &["LAB:A1C:Q1"]);
        let g2 = ids(&v, &["DX:E11", "MED:STATIN"]);
        let gens: Vec<&[TokenId]> = vec![&g1, &g2];
        let rep = nn_memorisation(&gens, &train, &mut rng_at(1, &[0])).unwrap();
        let brute = |g: &[TokenId]| -> f64 {
            let gs: BTreeSet<TokenId> = g.iter().copied().collect();
            train
                .iter()
                .map(|t| {
                    let ts: BTreeSet<TokenId> = t.iter().copied().collect();
                    set_jaccard(&gs, &ts)
                })
                .fold(0.0, f64::max)
        };
        let expect_mean = (brute(&g1) + brute(&g2)) / 2.0;
        assert!((rep.mean_nn_jaccard - expect_mean).abs() < 1e-12);
        assert_eq!(rep.max_nn_jaccard, brute(&g1).max(brute(&g2)));
    }

    #[test]
    fn report_renders_every_row() {
        let v = vocab();
        let bos_seq = vec![
            BOS,
            v.id("SEX:F").unwrap(),
            v.id("LAB:A1C:Q2").unwrap(),
            v.id("MED:STATIN").unwrap(),
            v.id("LAB:A1C:Q3").unwrap(),
            EOS,
        ];
        let dts = [0.0, 0.0, 3.0, 0.0, 14.0, 30.0];
        let pool: Vec<&[TokenId]> = vec![&bos_seq];
        let rep = fidelity_report(&pool, &dts, &pool, &dts, &v).unwrap();
        assert_eq!(rep.type_jaccard_pooled, 1.0);
        assert_eq!(rep.timing.ks, Some(0.0));
        let table = render_table(&rep);
        assert!(table.contains("Type Jaccard (pooled)"));
        assert!(table.contains("KS statistic"));
        assert!(table.contains("MED->LAB"));
        for line in table.lines() {
            assert!(!line.trim().is_empty());
        }
        // JSON-serializable.
        let js = serde_json::to_string(&rep).unwrap();
        assert!(js.contains("type_jaccard_pooled"));
    }
}
