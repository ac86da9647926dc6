//! Synthetic cohort generator with planted drug effects.
//!
//! Every patient carries a static latent severity and an intermittent
//! "flare" state. One designated severity measure (the first, `M0`)
//! reads out severity plus flare; planted drug effects shift *other*
//! measures, optionally conditioned on the prompt-visible severity
//! proxy (the mean of the last five severity readings). Prescriptions
//! are confounded by indication: the decision rate rises with both
//! latent severity and the recent proxy, so incident users tend to be
//! anchored at flares. That recency anchoring is what gives ordered
//! prompts information that shuffled prompts lose, and the proxy
//! conditioning is what makes state-dependent effects collapse under
//! shuffling while state-independent ones survive.
//!
//! None of this aims at clinical realism; it is a measurement
//! instrument with known ground truth, recorded in the ledger.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::PatientSequence;
use crate::error::{Error, Result};
use crate::rng::{rng_at, stream};
use crate::vocab::{build_vocabulary, TokenId, VocabRecipe, Vocabulary, BOS, DEATH, EOS, N_BINS};

// ---------------------------------------------------------------------------
// Fixed generative constants
//
// These are part of the planted law, not knobs: tests and the ledger
// rely on their values.

/// Severity readings per event step get this much weight relative to
/// the other measures combined equally.
const SEV_MEASURE_WEIGHT: f64 = 1.0;
const OTHER_MEASURE_WEIGHT: f64 = 0.5;
/// Flare entry probability per event while quiescent.
const FLARE_ENTRY: f64 = 0.08;
/// Flare exit probability per event while active (mean run 10 events).
const FLARE_EXIT: f64 = 0.10;
/// Quintile boost the flare adds to severity readings.
const FLARE_BOOST: f64 = 1.6;
/// Latent severity scale in the severity measure.
const SEV_SCALE: f64 = 0.7;
/// Latent severity scale in all other measures (confounding channel).
const OUT_SEV_SCALE: f64 = 0.4;
/// Reading noise (quintile units, before rounding).
const NOISE_SD: f64 = 0.5;
/// Base log-odds of prescribing at a decision step.
const CONF_BASE: f64 = -2.5;
/// Base log-odds of death per event at severity zero.
const MORTALITY_BASE: f64 = -6.5;
/// Readings in the prompt-visible severity proxy.
pub const PROXY_K: usize = 5;
/// State-dependent effects fire when the proxy exceeds this (the
/// population median of the severity measure).
pub const STATE_THRESHOLD: f64 = 3.0;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectSpec {
    /// Medication class name, e.g. `C0`.
    pub drug_class: String,
    /// Target measure name, e.g. `M1`. Must not be the severity
    /// measure, which would feed the effect back into its own gate.
    pub measure: String,
    pub delta_quintiles: f64,
    /// Fire only while the severity proxy exceeds [`STATE_THRESHOLD`].
    pub state_dependent: bool,
    /// Days after prescription before the effect applies.
    pub onset_lag_days: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingConfig {
    /// Probability of a zero gap (same-encounter events).
    pub p_zero: f64,
    /// Log-normal location of nonzero gaps (log days).
    pub mu_t: f64,
    /// Log-normal scale of nonzero gaps.
    pub sigma_t: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub n_measures: usize,
    pub n_med_classes: usize,
    pub n_dx: usize,
    /// Inclusive event-count range, drawn uniformly per patient
    /// (events exclude [BOS], demographics, and the terminal token).
    pub seq_len: (usize, usize),
    pub timing: TimingConfig,
    /// Probability an event step is a prescription decision. Together
    /// with `p_dx` this sets the event-category mix, so shifting them
    /// fakes a site with different documentation habits.
    #[serde(default = "default_p_drug_decision")]
    pub p_drug_decision: f64,
    /// Probability an event step is a diagnosis emission.
    #[serde(default = "default_p_dx")]
    pub p_dx: f64,
    pub effects: Vec<EffectSpec>,
    /// Medication class -> slope of prescription log-odds in latent
    /// severity (confounding by indication). Missing classes get 0.
    pub confounding: BTreeMap<String, f64>,
    /// Slope of prescription log-odds in (severity proxy - 3): recency
    /// anchoring. Zero decouples prescriptions from visible state.
    pub recency_slope: f64,
    /// Slope of per-event death log-odds in severity.
    pub mortality_hazard_slope: f64,
    /// CLI runs override this with the mandatory `--seed` flag.
    #[serde(default)]
    pub seed: u64,
}

fn default_p_drug_decision() -> f64 {
    0.15
}

fn default_p_dx() -> f64 {
    0.10
}

impl CohortConfig {
    pub fn measure_names(&self) -> Vec<String> {
        (0..self.n_measures).map(|i| format!("M{i}")).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_med_classes).map(|i| format!("C{i}")).collect()
    }

    pub fn dx_names(&self) -> Vec<String> {
        (0..self.n_dx).map(|i| format!("D{i}")).collect()
    }

    /// Name of the severity-proxy measure.
    pub fn severity_measure(&self) -> String {
        "M0".into()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 {
            return bad("n_patients must be >= 1".into());
        }
        if self.n_measures == 0 || self.n_med_classes == 0 || self.n_dx == 0 {
            return bad("need at least one measure, class, and dx code".into());
        }
        if self.seq_len.0 < 1 || self.seq_len.0 > self.seq_len.1 {
            return bad(format!("bad seq_len range {:?}", self.seq_len));
        }
        if !(0.0..=1.0).contains(&self.timing.p_zero) {
            return bad(format!("p_zero {} outside [0,1]", self.timing.p_zero));
        }
        if !self.timing.mu_t.is_finite() || !self.timing.sigma_t.is_finite() || self.timing.sigma_t < 0.0 {
            return bad("timing parameters must be finite, sigma_t >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.p_drug_decision)
            || !(0.0..=1.0).contains(&self.p_dx)
            || self.p_drug_decision + self.p_dx > 0.9
        {
            // Measure readings drive both the severity proxy and every
            // outcome; they must keep at least a tenth of the event mass.
            return bad(format!(
                "category mix p_drug_decision {} + p_dx {} must fit in [0, 0.9]",
                self.p_drug_decision, self.p_dx
            ));
        }
        if !self.recency_slope.is_finite() || !self.mortality_hazard_slope.is_finite() {
            return bad("slopes must be finite".into());
        }
        let measures = self.measure_names();
        let classes = self.class_names();
        for e in &self.effects {
            if !classes.contains(&e.drug_class) {
                return bad(format!("effect names unknown class {}", e.drug_class));
            }
            if !measures.contains(&e.measure) {
                return bad(format!("effect names unknown measure {}", e.measure));
            }
            if e.measure == self.severity_measure() {
                return bad(format!(
                    "effect targets the severity measure {}; the proxy gate would feed back into itself",
                    e.measure
                ));
            }
            if !(-4.0..=4.0).contains(&e.delta_quintiles) {
                return bad(format!("delta {} outside [-4, 4]", e.delta_quintiles));
            }
            if !(e.onset_lag_days >= 0.0) {
                return bad(format!("onset lag {} must be >= 0", e.onset_lag_days));
            }
        }
        for (class, slope) in &self.confounding {
            if !classes.contains(class) {
                return bad(format!("confounding names unknown class {class}"));
            }
            if !slope.is_finite() {
                return bad(format!("confounding slope for {class} must be finite"));
            }
        }
        Ok(())
    }

    /// The vocabulary recipe this cohort is tokenized against.
    pub fn vocab_recipe(&self) -> VocabRecipe {
        VocabRecipe {
            lab_measures: self.measure_names(),
            vital_measures: vec![],
            med_classes: self.class_names(),
            med_drugs: vec![],
            dx_codes: self.dx_names(),
            sexes: vec!["F".into(), "M".into()],
            smoke_levels: vec!["NEVER".into(), "FORMER".into(), "CURRENT".into()],
        }
    }
}

// ---------------------------------------------------------------------------
// Ground truth ledger

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub drug_class: String,
    pub drug_token: String,
    pub measure: String,
    /// Measure key as the metrics and stats layers name it.
    pub measure_key: String,
    pub delta_quintiles: f64,
    pub state_dependent: bool,
    pub onset_lag_days: f64,
    /// Sign of the planted delta: the direction an effect probe must
    /// recover.
    pub expected_direction: i8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthLedger {
    pub seed: u64,
    pub n_patients: usize,
    pub severity_measure_key: String,
    pub state_threshold: f64,
    pub proxy_k: usize,
    pub recency_slope: f64,
    pub mortality_hazard_slope: f64,
    pub confounding: BTreeMap<String, f64>,
    pub effects: Vec<PlantedEffect>,
}

// ---------------------------------------------------------------------------
// Generation

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn lookup(vocab: &Vocabulary, s: &str) -> Result<TokenId> {
    vocab
        .id(s)
        .ok_or_else(|| Error::Vocab(format!("token {s} missing from vocabulary")))
}

/// Pre-resolved token ids for fast emission.
struct TokenTable {
    ages: Vec<TokenId>,
    sexes: Vec<TokenId>,
    smokes: Vec<TokenId>,
    dx: Vec<TokenId>,
    meds: Vec<TokenId>,
    /// `labs[m][q-1]` is `LAB:M{m}:Q{q}`.
    labs: Vec<Vec<TokenId>>,
}

impl TokenTable {
    fn build(cfg: &CohortConfig, vocab: &Vocabulary) -> Result<Self> {
        let id = |s: String| lookup(vocab, &s);
        Ok(TokenTable {
            ages: (1..=10).map(|d| id(format!("AGE:D{d}"))).collect::<Result<_>>()?,
            sexes: ["F", "M"].iter().map(|s| id(format!("SEX:{s}"))).collect::<Result<_>>()?,
            smokes: ["NEVER", "FORMER", "CURRENT"]
                .iter()
                .map(|s| id(format!("SMOKE:{s}")))
                .collect::<Result<_>>()?,
            dx: cfg.dx_names().iter().map(|d| id(format!("DX:{d}"))).collect::<Result<_>>()?,
            meds: cfg.class_names().iter().map(|c| id(format!("MED:{c}"))).collect::<Result<_>>()?,
            labs: cfg
                .measure_names()
                .iter()
                .map(|m| {
                    (1..=N_BINS as u8)
                        .map(|q| id(format!("LAB:{m}:Q{q}")))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?,
        })
    }
}

/// Internal per-effect view with resolved indices.
struct EffectView {
    class_idx: usize,
    measure_idx: usize,
    delta: f64,
    state_dependent: bool,
    lag_days: f64,
}

struct PatientState {
    severity: f64,
    flare: bool,
    /// Last [`PROXY_K`] severity-measure quintiles.
    recent_severity: VecDeque<f64>,
    /// Onset day per medication class, once prescribed.
    onset: Vec<Option<f64>>,
    day: f64,
}

impl PatientState {
    fn proxy(&self) -> f64 {
        if self.recent_severity.is_empty() {
            // No readings yet: neutral, strictly below the gate.
            STATE_THRESHOLD
        } else {
            self.recent_severity.iter().sum::<f64>() / self.recent_severity.len() as f64
        }
    }
}

fn sample_gap(timing: &TimingConfig, rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen::<f64>() < timing.p_zero {
        return 0.0;
    }
    let z: f64 = rng.sample(StandardNormal);
    (timing.mu_t + timing.sigma_t * z).exp()
}

fn clip_quintile(x: f64) -> f64 {
    x.round().clamp(1.0, N_BINS as f64)
}

/// Emits one reading of measure `m` and returns its quintile.
fn reading(
    cfg: &CohortConfig,
    effects: &[EffectView],
    st: &mut PatientState,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * NOISE_SD;
    let mean = if m == 0 {
        3.0 + SEV_SCALE * st.severity + if st.flare { FLARE_BOOST } else { 0.0 }
    } else {
        let mut mu = 3.0 + OUT_SEV_SCALE * st.severity;
        for e in effects {
            if e.measure_idx != m {
                continue;
            }
            let on = match st.onset[e.class_idx] {
                Some(day) => st.day >= day + e.lag_days,
                None => false,
            };
            if on && (!e.state_dependent || st.proxy() > STATE_THRESHOLD) {
                mu += e.delta;
            }
        }
        mu
    };
    let q = clip_quintile(mean + noise);
    if m == 0 {
        if st.recent_severity.len() == PROXY_K {
            st.recent_severity.pop_front();
        }
        st.recent_severity.push_back(q);
    }
    let _ = cfg;
    q
}

fn generate_patient(
    cfg: &CohortConfig,
    table: &TokenTable,
    effects: &[EffectView],
    conf_slopes: &[f64],
    patient_id: u64,
) -> PatientSequence {
    let mut rng = rng_at(cfg.seed, &[stream::SYNTH_PATIENT, patient_id]);
    let mut tokens = vec![BOS];
    let mut deltas = vec![0.0];

    // Demographics: age decile, sex, smoking, all same-day.
    tokens.push(table.ages[rng.gen_range(2..8)]);
    deltas.push(0.0);
    tokens.push(table.sexes[rng.gen_range(0..table.sexes.len())]);
    deltas.push(0.0);
    tokens.push(table.smokes[rng.gen_range(0..table.smokes.len())]);
    deltas.push(0.0);

    let mut st = PatientState {
        severity: rng.sample(StandardNormal),
        flare: false,
        recent_severity: VecDeque::with_capacity(PROXY_K),
        onset: vec![None; cfg.n_med_classes],
        day: 0.0,
    };

    // Measure-choice weights: severity measure first.
    let total_w = SEV_MEASURE_WEIGHT + OTHER_MEASURE_WEIGHT * (cfg.n_measures - 1) as f64;

    let n_events = rng.gen_range(cfg.seq_len.0..=cfg.seq_len.1);
    let mut died = false;
    for _ in 0..n_events {
        // Flare dynamics, then the day advances with the event's gap.
        if st.flare {
            if rng.gen::<f64>() < FLARE_EXIT {
                st.flare = false;
            }
        } else if rng.gen::<f64>() < FLARE_ENTRY {
            st.flare = true;
        }
        let gap = sample_gap(&cfg.timing, &mut rng);
        st.day += gap;

        let hazard = sigmoid(
            MORTALITY_BASE
                + cfg.mortality_hazard_slope
                    * (st.severity + if st.flare { 0.5 } else { 0.0 }),
        );
        if rng.gen::<f64>() < hazard {
            tokens.push(DEATH);
            deltas.push(gap);
            died = true;
            break;
        }

        let kind: f64 = rng.gen();
        if kind < cfg.p_drug_decision {
            let c = rng.gen_range(0..cfg.n_med_classes);
            let p = sigmoid(
                CONF_BASE
                    + conf_slopes[c] * st.severity
                    + cfg.recency_slope * (st.proxy() - STATE_THRESHOLD),
            );
            if st.onset[c].is_none() && rng.gen::<f64>() < p {
                st.onset[c] = Some(st.day);
                tokens.push(table.meds[c]);
                deltas.push(gap);
                continue;
            }
            // Declined or already prescribed: the encounter records a
            // severity reading instead.
            let q = reading(cfg, effects, &mut st, 0, &mut rng);
            tokens.push(table.labs[0][q as usize - 1]);
            deltas.push(gap);
            continue;
        }
        if kind < cfg.p_drug_decision + cfg.p_dx {
            tokens.push(table.dx[rng.gen_range(0..cfg.n_dx)]);
            deltas.push(gap);
            continue;
        }
        // Measure reading, severity-weighted choice.
        let mut pick: f64 = rng.gen::<f64>() * total_w;
        let mut m = 0usize;
        if pick >= SEV_MEASURE_WEIGHT {
            pick -= SEV_MEASURE_WEIGHT;
            m = 1 + (pick / OTHER_MEASURE_WEIGHT) as usize;
            m = m.min(cfg.n_measures - 1);
        }
        let q = reading(cfg, effects, &mut st, m, &mut rng);
        tokens.push(table.labs[m][q as usize - 1]);
        deltas.push(gap);
    }
    if !died {
        tokens.push(EOS);
        deltas.push(sample_gap(&cfg.timing, &mut rng));
    }
    PatientSequence {
        patient_id,
        tokens,
        deltas,
    }
}

/// Generates the cohort and its ground-truth ledger. The vocabulary is
/// fully determined by the config ([`CohortConfig::vocab_recipe`]).
pub fn generate_cohort(cfg: &CohortConfig) -> Result<(Vec<PatientSequence>, GroundTruthLedger)> {
    cfg.validate()?;
    let vocab = build_vocabulary(&cfg.vocab_recipe())?;
    let table = TokenTable::build(cfg, &vocab)?;
    let measures = cfg.measure_names();
    let classes = cfg.class_names();
    let effects: Vec<EffectView> = cfg
        .effects
        .iter()
        .map(|e| EffectView {
            class_idx: classes.iter().position(|c| *c == e.drug_class).unwrap(),
            measure_idx: measures.iter().position(|m| *m == e.measure).unwrap(),
            delta: e.delta_quintiles,
            state_dependent: e.state_dependent,
            lag_days: e.onset_lag_days,
        })
        .collect();
    let conf_slopes: Vec<f64> = classes
        .iter()
        .map(|c| cfg.confounding.get(c).copied().unwrap_or(0.0))
        .collect();

    let patients: Vec<PatientSequence> = (0..cfg.n_patients as u64)
        .into_par_iter()
        .map(|pid| generate_patient(cfg, &table, &effects, &conf_slopes, pid))
        .collect();

    let ledger = GroundTruthLedger {
        seed: cfg.seed,
        n_patients: cfg.n_patients,
        severity_measure_key: format!("LAB:{}", cfg.severity_measure()),
        state_threshold: STATE_THRESHOLD,
        proxy_k: PROXY_K,
        recency_slope: cfg.recency_slope,
        mortality_hazard_slope: cfg.mortality_hazard_slope,
        confounding: cfg.confounding.clone(),
        effects: cfg
            .effects
            .iter()
            .map(|e| PlantedEffect {
                drug_class: e.drug_class.clone(),
                drug_token: format!("MED:{}", e.drug_class),
                measure: e.measure.clone(),
                measure_key: format!("LAB:{}", e.measure),
                delta_quintiles: e.delta_quintiles,
                state_dependent: e.state_dependent,
                onset_lag_days: e.onset_lag_days,
                expected_direction: if e.delta_quintiles > 0.0 {
                    1
                } else if e.delta_quintiles < 0.0 {
                    -1
                } else {
                    0
                },
            })
            .collect(),
    };
    Ok((patients, ledger))
}

// ---------------------------------------------------------------------------
// Direct (model-free) ledger verification

#[derive(Debug, Clone, Serialize)]
pub struct ContrastRow {
    pub drug_class: String,
    pub measure_key: String,
    /// Patients with readings on both sides of their first exposure.
    pub n_patients: usize,
    /// Post-exposure reading count, pooled.
    pub n_post_events: usize,
    /// Mean within-patient (post - pre) quintile shift.
    pub mean_shift: f64,
    /// Wilcoxon signed-rank p over the per-patient shifts.
    pub p: f64,
}

/// Within-patient pre/post contrast on the raw synthetic data, one row
/// per planted effect: the ground-truth ledger must be recoverable
/// without any model in the loop.
pub fn direct_contrast(
    cohort: &[PatientSequence],
    vocab: &Vocabulary,
    ledger: &GroundTruthLedger,
) -> Result<Vec<ContrastRow>> {
    use crate::generator::is_measure_token;
    use crate::stats::wilcoxon_signed_rank;

    let mut rows = Vec::new();
    for effect in &ledger.effects {
        let drug = lookup(vocab, &effect.drug_token)?;
        let mut shifts = Vec::new();
        let mut n_post_events = 0usize;
        for p in cohort {
            let Some(anchor) = p.tokens.iter().position(|t| *t == drug) else {
                continue;
            };
            let mut pre = Vec::new();
            let mut post = Vec::new();
            for (i, t) in p.tokens.iter().enumerate() {
                if is_measure_token(vocab, *t, &effect.measure_key) {
                    if let Some(b) = vocab.kind(*t).ordinal_bin() {
                        if i < anchor {
                            pre.push(b as f64);
                        } else {
                            post.push(b as f64);
                        }
                    }
                }
            }
            if pre.is_empty() || post.is_empty() {
                continue;
            }
            n_post_events += post.len();
            shifts.push(
                post.iter().sum::<f64>() / post.len() as f64
                    - pre.iter().sum::<f64>() / pre.len() as f64,
            );
        }
        if shifts.is_empty() {
            return Err(Error::Stats(format!(
                "no patient exposes both sides of {}",
                effect.drug_token
            )));
        }
        let mean_shift = shifts.iter().sum::<f64>() / shifts.len() as f64;
        rows.push(ContrastRow {
            drug_class: effect.drug_class.clone(),
            measure_key: effect.measure_key.clone(),
            n_patients: shifts.len(),
            n_post_events,
            mean_shift,
            p: wilcoxon_signed_rank(&shifts)?.p,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{assign_splits, validate_sequence, Split};
    use crate::generator::is_measure_token;

    fn base_cfg(n_patients: usize, seed: u64) -> CohortConfig {
        CohortConfig {
            n_patients,
            n_measures: 2,
            n_med_classes: 2,
            n_dx: 3,
            seq_len: (20, 40),
            timing: TimingConfig {
                p_zero: 0.3,
                mu_t: 2.0,
                sigma_t: 1.0,
            },
            p_drug_decision: default_p_drug_decision(),
            p_dx: default_p_dx(),
            effects: vec![],
            confounding: BTreeMap::new(),
            recency_slope: 0.0,
            mortality_hazard_slope: 0.0,
            seed,
        }
    }

    fn effect(class: &str, measure: &str, delta: f64, state_dependent: bool) -> EffectSpec {
        EffectSpec {
            drug_class: class.into(),
            measure: measure.into(),
            delta_quintiles: delta,
            state_dependent,
            onset_lag_days: 0.0,
        }
    }

    #[test]
    fn sequences_are_structurally_valid() {
        let cfg = base_cfg(50, 1);
        let (cohort, _) = generate_cohort(&cfg).unwrap();
        assert_eq!(cohort.len(), 50);
        let vocab = build_vocabulary(&cfg.vocab_recipe()).unwrap();
        for p in &cohort {
            validate_sequence(p).unwrap();
            assert!(vocab.is_terminal(*p.tokens.last().unwrap()));
            // BOS + 3 demographics with zero gaps.
            assert_eq!(p.deltas[..4], [0.0; 4]);
        }
    }

    #[test]
    fn null_plant_gives_identical_outcome_distributions() {
        let mut cfg = base_cfg(10_000, 2);
        cfg.effects = vec![effect("C0", "M1", 0.0, false)];
        let (cohort, _) = generate_cohort(&cfg).unwrap();
        let vocab = build_vocabulary(&cfg.vocab_recipe()).unwrap();
        let drug = vocab.id("MED:C0").unwrap();

        let mut hists = [[0.0f64; 5]; 2];
        for p in &cohort {
            let has = p.tokens.contains(&drug) as usize;
            for t in &p.tokens {
                if is_measure_token(&vocab, *t, "LAB:M1") {
                    if let Some(b) = vocab.kind(*t).ordinal_bin() {
                        hists[has][b as usize - 1] += 1.0;
                    }
                }
            }
        }
        let sums = [hists[0].iter().sum::<f64>(), hists[1].iter().sum::<f64>()];
        assert!(sums[0] > 1000.0 && sums[1] > 1000.0, "thin arms {sums:?}");
        let tv: f64 = (0..5)
            .map(|i| (hists[0][i] / sums[0] - hists[1][i] / sums[1]).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn p_zero_one_makes_all_gaps_zero() {
        let mut cfg = base_cfg(30, 3);
        cfg.timing.p_zero = 1.0;
        let (cohort, _) = generate_cohort(&cfg).unwrap();
        for p in &cohort {
            assert!(p.deltas.iter().all(|d| *d == 0.0));
        }
    }

    #[test]
    fn zero_fraction_matches_p_zero() {
        let mut cfg = base_cfg(3000, 4);
        cfg.seq_len = (35, 45);
        cfg.timing.p_zero = 0.35;
        let (cohort, _) = generate_cohort(&cfg).unwrap();
        // Demographic gaps are structurally zero; the timing law only
        // covers event gaps.
        let gaps: Vec<f64> = cohort.iter().flat_map(|p| p.deltas[4..].to_vec()).collect();
        assert!(gaps.len() > 100_000, "only {} gaps", gaps.len());
        let frac = gaps.iter().filter(|d| **d == 0.0).count() as f64 / gaps.len() as f64;
        assert!((frac - 0.35).abs() < 0.01, "zero fraction {frac}");
    }

    #[test]
    fn planted_plus_one_shifts_post_readings_by_one() {
        let mut cfg = base_cfg(6000, 5);
        cfg.seq_len = (40, 60);
        cfg.effects = vec![effect("C0", "M1", 1.0, false)];
        cfg.confounding.insert("C0".into(), 0.8);
        cfg.recency_slope = 1.2;
        let (cohort, ledger) = generate_cohort(&cfg).unwrap();
        let vocab = build_vocabulary(&cfg.vocab_recipe()).unwrap();
        let rows = direct_contrast(&cohort, &vocab, &ledger).unwrap();
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert!(r.n_post_events >= 10_000, "{} post events", r.n_post_events);
        assert!(
            (r.mean_shift - 1.0).abs() <= 0.1,
            "shift {} off the planted +1",
            r.mean_shift
        );
        assert!(r.p < 0.001, "p {}", r.p);
    }

    #[test]
    fn ledger_contrast_recovers_every_planted_sign() {
        let mut cfg = base_cfg(10_000, 6);
        cfg.n_measures = 3;
        cfg.n_med_classes = 3;
        cfg.effects = vec![
            effect("C0", "M1", 1.0, false),
            effect("C1", "M2", -1.0, false),
            effect("C2", "M1", 1.5, true),
        ];
        cfg.confounding.insert("C0".into(), 0.8);
        cfg.confounding.insert("C2".into(), 0.8);
        cfg.recency_slope = 1.2;
        cfg.mortality_hazard_slope = 1.0;
        let (cohort, ledger) = generate_cohort(&cfg).unwrap();
        let vocab = build_vocabulary(&cfg.vocab_recipe()).unwrap();
        let rows = direct_contrast(&cohort, &vocab, &ledger).unwrap();
        assert_eq!(rows.len(), 3);
        for (row, planted) in rows.iter().zip(&ledger.effects) {
            assert!(
                row.mean_shift.signum() as i8 == planted.expected_direction,
                "{}: shift {} vs planted {}",
                planted.drug_token,
                row.mean_shift,
                planted.delta_quintiles
            );
            assert!(row.p < 0.001, "{}: p {}", planted.drug_token, row.p);
        }
    }

    #[test]
    fn state_dependent_effects_express_only_above_the_gate() {
        let mut cfg = base_cfg(4000, 7);
        cfg.seq_len = (60, 100);
        cfg.effects = vec![effect("C0", "M1", 1.5, true)];
        cfg.confounding.insert("C0".into(), 0.8);
        cfg.recency_slope = 1.2;
        let (cohort, _) = generate_cohort(&cfg).unwrap();
        let vocab = build_vocabulary(&cfg.vocab_recipe()).unwrap();
        let drug = vocab.id("MED:C0").unwrap();

        // Re-derive the proxy by walking tokens, then compare post-drug
        // outcome readings across the gate within each patient.
        let mut within: Vec<f64> = Vec::new();
        for p in &cohort {
            let Some(anchor) = p.tokens.iter().position(|t| *t == drug) else {
                continue;
            };
            let mut recent: VecDeque<f64> = VecDeque::new();
            let mut high = Vec::new();
            let mut low = Vec::new();
            for (i, t) in p.tokens.iter().enumerate() {
                if is_measure_token(&vocab, *t, "LAB:M0") {
                    if recent.len() == PROXY_K {
                        recent.pop_front();
                    }
                    recent.push_back(vocab.kind(*t).ordinal_bin().unwrap() as f64);
                }
                if i > anchor && is_measure_token(&vocab, *t, "LAB:M1") {
                    let proxy = if recent.is_empty() {
                        STATE_THRESHOLD
                    } else {
                        recent.iter().sum::<f64>() / recent.len() as f64
                    };
                    let q = vocab.kind(*t).ordinal_bin().unwrap() as f64;
                    if proxy > STATE_THRESHOLD {
                        high.push(q);
                    } else {
                        low.push(q);
                    }
                }
            }
            if !high.is_empty() && !low.is_empty() {
                within.push(
                    high.iter().sum::<f64>() / high.len() as f64
                        - low.iter().sum::<f64>() / low.len() as f64,
                );
            }
        }
        assert!(within.len() > 200, "only {} informative patients", within.len());
        let mean = within.iter().sum::<f64>() / within.len() as f64;
        assert!(
            (mean - 1.5).abs() < 0.15,
            "above-gate minus below-gate shift {mean} vs planted 1.5"
        );
    }

    #[test]
    fn cohorts_are_byte_identical_across_runs() {
        let mut cfg = base_cfg(200, 8);
        cfg.effects = vec![effect("C0", "M1", 1.0, false)];
        cfg.mortality_hazard_slope = 1.0;
        let (a, _) = generate_cohort(&cfg).unwrap();
        let (b, _) = generate_cohort(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tokens, y.tokens);
            let xb: Vec<u64> = x.deltas.iter().map(|d| d.to_bits()).collect();
            let yb: Vec<u64> = y.deltas.iter().map(|d| d.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        cfg.seed = 9;
        let (c, _) = generate_cohort(&cfg).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.tokens != y.tokens));
    }

    #[test]
    fn ten_patients_split_eight_one_one() {
        let labels = assign_splits(10, 0.8, 0.1, 11);
        let count = |s: Split| labels.iter().filter(|l| **l == s).count();
        assert_eq!(count(Split::Train), 8);
        assert_eq!(count(Split::Val), 1);
        assert_eq!(count(Split::Test), 1);
        assert_eq!(labels, assign_splits(10, 0.8, 0.1, 11));
    }

    #[test]
    fn config_validation_rejects_bad_plants() {
        let mut cfg = base_cfg(10, 1);
        cfg.effects = vec![effect("C9", "M1", 1.0, false)];
        assert!(generate_cohort(&cfg).is_err());
        cfg.effects = vec![effect("C0", "M9", 1.0, false)];
        assert!(generate_cohort(&cfg).is_err());
        cfg.effects = vec![effect("C0", "M1", 5.0, false)];
        assert!(generate_cohort(&cfg).is_err());
        cfg.effects = vec![effect("C0", "M0", 1.0, false)];
        let err = generate_cohort(&cfg).err().unwrap().to_string();
        assert!(err.contains("severity measure"), "{err}");
        cfg.effects = vec![];
        cfg.timing.p_zero = 1.5;
        assert!(generate_cohort(&cfg).is_err());
        cfg.timing.p_zero = 0.3;
        cfg.p_dx = 0.8;
        // 0.15 + 0.8 leaves too little event mass for measure readings.
        assert!(generate_cohort(&cfg).is_err());
    }

    #[test]
    fn mortality_slope_kills_the_severe() {
        let mut cfg = base_cfg(2000, 12);
        cfg.mortality_hazard_slope = 1.5;
        let (cohort, _) = generate_cohort(&cfg).unwrap();
        let died = cohort
            .iter()
            .filter(|p| *p.tokens.last().unwrap() == DEATH)
            .count();
        assert!(died > 50, "only {died} deaths");
        // Dead patients should show higher severity readings: compare
        // mean M0 quintile.
        let vocab = build_vocabulary(&cfg.vocab_recipe()).unwrap();
        let mean_sev = |dead: bool| {
            let mut vals = Vec::new();
            for p in &cohort {
                if (*p.tokens.last().unwrap() == DEATH) != dead {
                    continue;
                }
                for t in &p.tokens {
                    if is_measure_token(&vocab, *t, "LAB:M0") {
                        vals.push(vocab.kind(*t).ordinal_bin().unwrap() as f64);
                    }
                }
            }
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        assert!(
            mean_sev(true) > mean_sev(false) + 0.2,
            "dead {} vs alive {}",
            mean_sev(true),
            mean_sev(false)
        );
    }
}
