//! Incident-user effect pipeline over generated trajectories.
//!
//! The unit of inference is the patient: one prompt cut immediately
//! before first exposure, paired forced-token arms generated from that
//! shared prompt, and a single difference-in-differences number per
//! patient. Everything downstream (Wilcoxon, CI, GLM, ablation) sees
//! patient-level summaries only, never replicate-level rows, which is
//! what keeps pseudo-replication out of the tests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cohort::PatientSequence;
use crate::error::{Error, Result};
use crate::generator::{
    class_prefix, generate, generate_arms, is_measure_token, GenerationConfig, Trajectory,
};
use crate::model::FrozenModel;
use crate::rng::{rng_at, stream};
use crate::stats::glm::{glm_logit_cluster, GlmFit, GlmRow};
use crate::stats::wilcoxon::wilcoxon_signed_rank;
use crate::vocab::{TokenId, Vocabulary, DEATH};

// ---------------------------------------------------------------------------
// Specification types

/// What is measured after the intervention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Outcome {
    /// A surrogate biomarker, named by its measure key
    /// (`LAB:HBA1C`, `VITAL:SBP`, ...); outcomes are mean quintiles.
    Measure(String),
    /// Death-token indicator within the window.
    Mortality,
}

impl From<String> for Outcome {
    fn from(s: String) -> Self {
        if s == "MORTALITY" {
            Outcome::Mortality
        } else {
            Outcome::Measure(s)
        }
    }
}

impl From<Outcome> for String {
    fn from(o: Outcome) -> String {
        match o {
            Outcome::Mortality => "MORTALITY".into(),
            Outcome::Measure(m) => m,
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outcome::Mortality => f.write_str("MORTALITY"),
            Outcome::Measure(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonSpec {
    pub treat_token: TokenId,
    pub control_token: TokenId,
    pub outcome: Outcome,
    pub window_days: f64,
    pub n_patients: usize,
    pub n_per_arm: usize,
    #[serde(default = "default_baseline_k")]
    pub baseline_k: usize,
    /// Planted or hypothesized sign of the DiD, when known.
    #[serde(default)]
    pub expected_direction: Option<i8>,
}

fn default_baseline_k() -> usize {
    5
}

impl ComparisonSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_arm < 1 {
            return Err(Error::Config("n_per_arm must be >= 1".into()));
        }
        if !(self.window_days > 0.0) {
            return Err(Error::Config("window_days must be > 0".into()));
        }
        if self.baseline_k < 1 {
            return Err(Error::Config("baseline_k must be >= 1".into()));
        }
        if self.n_patients < 1 {
            return Err(Error::Config("n_patients must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Eligibility

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EligibilityReport {
    pub n_scanned: usize,
    /// Patients never receiving the treatment drug (no anchor).
    pub n_no_anchor: usize,
    /// Prompts lacking the outcome biomarker.
    pub n_no_biomarker: usize,
    /// Prompts already containing the control drug.
    pub n_control_in_prompt: usize,
    pub requested: usize,
    pub selected: usize,
    /// True when fewer eligible patients than requested were found;
    /// the run proceeds with what it has.
    pub short: bool,
}

/// Cuts each patient at their first treatment exposure and applies the
/// incident-user criteria to the prompt portion.
///
/// `max_prompt_len` tail-truncates long prompts (keeping the leading
/// [BOS] and the most recent events) so the model context can hold the
/// prompt plus the generation budget; eligibility is judged on the
/// truncated prompt the model will actually see.
pub fn select_eligible(
    patients: &[PatientSequence],
    vocab: &Vocabulary,
    spec: &ComparisonSpec,
    max_prompt_len: Option<usize>,
) -> Result<(Vec<PatientSequence>, EligibilityReport)> {
    spec.validate()?;
    if let Some(cap) = max_prompt_len {
        if cap < 2 {
            return Err(Error::Config(format!(
                "prompt budget of {cap} tokens cannot hold [BOS] plus history"
            )));
        }
    }
    let mut report = EligibilityReport {
        n_scanned: patients.len(),
        requested: spec.n_patients,
        ..EligibilityReport::default()
    };
    let mut eligible = Vec::new();
    for p in patients {
        let anchor = match p.tokens.iter().position(|t| *t == spec.treat_token) {
            Some(a) => a,
            None => {
                report.n_no_anchor += 1;
                continue;
            }
        };
        let mut tokens = p.tokens[..anchor].to_vec();
        let mut deltas = p.deltas[..anchor].to_vec();
        if let Some(cap) = max_prompt_len {
            if tokens.len() > cap {
                let tail = tokens.len() - (cap - 1);
                tokens = std::iter::once(tokens[0])
                    .chain(tokens[tail..].iter().copied())
                    .collect();
                deltas = std::iter::once(deltas[0])
                    .chain(deltas[tail..].iter().copied())
                    .collect();
            }
        }
        if tokens.contains(&spec.control_token) {
            report.n_control_in_prompt += 1;
            continue;
        }
        if let Outcome::Measure(m) = &spec.outcome {
            if !tokens.iter().any(|t| is_measure_token(vocab, *t, m)) {
                report.n_no_biomarker += 1;
                continue;
            }
        }
        eligible.push(PatientSequence {
            patient_id: p.patient_id,
            tokens,
            deltas,
        });
    }
    eligible.sort_by_key(|p| p.patient_id);
    eligible.truncate(spec.n_patients);
    report.selected = eligible.len();
    report.short = eligible.len() < spec.n_patients;
    Ok((eligible, report))
}

/// Mean outcome quintile over the last `k` prompt tokens carrying the
/// relevant biomarker (fewer if fewer exist). Mortality outcomes have
/// no prompt baseline; zero, so the DiD reduces to the post-period
/// contrast.
pub fn baseline_of(
    prompt: &PatientSequence,
    vocab: &Vocabulary,
    outcome: &Outcome,
    k: usize,
) -> Result<f64> {
    let measure = match outcome {
        Outcome::Mortality => return Ok(0.0),
        Outcome::Measure(m) => m,
    };
    let mut bins = Vec::with_capacity(k);
    for t in prompt.tokens.iter().rev() {
        if is_measure_token(vocab, *t, measure) {
            if let Some(b) = vocab.kind(*t).ordinal_bin() {
                bins.push(b as f64);
                if bins.len() == k {
                    break;
                }
            }
        }
    }
    if bins.is_empty() {
        return Err(Error::Stats(format!(
            "prompt for patient {} has no {measure} reading to baseline against",
            prompt.patient_id
        )));
    }
    Ok(bins.iter().sum::<f64>() / bins.len() as f64)
}

// ---------------------------------------------------------------------------
// Per-patient results and aggregation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientResult {
    pub patient_id: u64,
    pub baseline: f64,
    pub treat_mean: f64,
    pub control_mean: f64,
    /// (treat - baseline) - (control - baseline); the baseline cancels
    /// algebraically and is retained for reporting.
    pub did: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub mean_did: f64,
    pub ci95: (f64, f64),
    pub wilcoxon_p: f64,
    /// Patients contributing a DiD (eligible minus dropped).
    pub n_effective: usize,
    /// Sign of the mean DiD: -1, 0, or 1.
    pub direction: i8,
    /// Whether the direction matches `expected_direction`, when given.
    pub verdict: Option<bool>,
}

/// Full artifact of one pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRun {
    pub result: ComparisonResult,
    pub patients: Vec<PatientResult>,
    pub eligibility: EligibilityReport,
    /// Patients dropped for having an arm with no in-window outcome.
    pub n_dropped: usize,
}

/// Mean outcome of one trajectory within the window, or None when the
/// trajectory offers no in-window observation of the outcome.
fn replicate_outcome(
    traj: &Trajectory,
    vocab: &Vocabulary,
    outcome: &Outcome,
    window_days: f64,
) -> Option<f64> {
    let tokens = traj.generated_tokens();
    let deltas = traj.generated_deltas();
    let mut elapsed = 0.0;
    match outcome {
        Outcome::Mortality => {
            for (t, dt) in tokens.iter().zip(deltas) {
                elapsed += dt;
                if elapsed > window_days {
                    break;
                }
                if *t == DEATH {
                    return Some(1.0);
                }
            }
            Some(0.0)
        }
        Outcome::Measure(m) => {
            let mut bins = Vec::new();
            for (t, dt) in tokens.iter().zip(deltas) {
                elapsed += dt;
                if elapsed > window_days {
                    break;
                }
                if is_measure_token(vocab, *t, m) {
                    if let Some(b) = vocab.kind(*t).ordinal_bin() {
                        bins.push(b as f64);
                    }
                }
            }
            if bins.is_empty() {
                None
            } else {
                Some(bins.iter().sum::<f64>() / bins.len() as f64)
            }
        }
    }
}

fn arm_mean(
    arm: &[Trajectory],
    vocab: &Vocabulary,
    outcome: &Outcome,
    window_days: f64,
) -> Option<f64> {
    let vals: Vec<f64> = arm
        .iter()
        .filter_map(|t| replicate_outcome(t, vocab, outcome, window_days))
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Generates both arms for one patient.
///
/// The self-comparison null (treat == control) cannot go through
/// [`generate_arms`], which rejects same-class pairs; instead the same
/// token is forced in both arms with disjoint replicate indices, giving
/// two independent draws from one law.
fn arms_for_patient(
    frozen: &FrozenModel,
    vocab: &Vocabulary,
    prompt: &PatientSequence,
    spec: &ComparisonSpec,
    cfg: &GenerationConfig,
    run_seed: u64,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    if spec.treat_token != spec.control_token {
        return generate_arms(
            frozen,
            vocab,
            prompt,
            spec.treat_token,
            spec.control_token,
            spec.n_per_arm,
            cfg,
            run_seed,
        );
    }
    let class = class_prefix(vocab, spec.treat_token)?;
    let mut arm_cfg = cfg.clone();
    arm_cfg.suppress.extend(vocab.suppression_set(&[class])?);
    let gen_arm = |rep_base: usize| -> Result<Vec<Trajectory>> {
        (0..spec.n_per_arm)
            .map(|rep| {
                let mut rng = rng_at(
                    run_seed,
                    &[
                        stream::GENERATE,
                        prompt.patient_id,
                        spec.treat_token.0 as u64,
                        (rep_base + rep) as u64,
                    ],
                );
                generate(frozen, vocab, prompt, Some(spec.treat_token), &arm_cfg, &mut rng)
            })
            .collect()
    };
    Ok((gen_arm(0)?, gen_arm(spec.n_per_arm)?))
}

fn run_prepared(
    frozen: &FrozenModel,
    vocab: &Vocabulary,
    spec: &ComparisonSpec,
    cfg: &GenerationConfig,
    prompts: &[PatientSequence],
    eligibility: EligibilityReport,
    run_seed: u64,
) -> Result<ComparisonRun> {
    let per_patient: Vec<Option<PatientResult>> = prompts
        .par_iter()
        .map(|prompt| -> Result<Option<PatientResult>> {
            let baseline = match baseline_of(prompt, vocab, &spec.outcome, spec.baseline_k) {
                Ok(b) => b,
                Err(_) => return Ok(None),
            };
            let (treat, control) = arms_for_patient(frozen, vocab, prompt, spec, cfg, run_seed)?;
            let t = arm_mean(&treat, vocab, &spec.outcome, spec.window_days);
            let c = arm_mean(&control, vocab, &spec.outcome, spec.window_days);
            Ok(match (t, c) {
                (Some(treat_mean), Some(control_mean)) => Some(PatientResult {
                    patient_id: prompt.patient_id,
                    baseline,
                    treat_mean,
                    control_mean,
                    did: treat_mean - control_mean,
                }),
                _ => None,
            })
        })
        .collect::<Result<_>>()?;

    let n_dropped = per_patient.iter().filter(|r| r.is_none()).count();
    let patients: Vec<PatientResult> = per_patient.into_iter().flatten().collect();
    if patients.is_empty() {
        return Err(Error::Stats(
            "no patient produced an in-window outcome in both arms".into(),
        ));
    }
    let dids: Vec<f64> = patients.iter().map(|p| p.did).collect();
    let n = dids.len();
    let mean_did = dids.iter().sum::<f64>() / n as f64;
    let ci95 = if n >= 2 {
        let var = dids.iter().map(|d| (d - mean_did).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| Error::Stats(e.to_string()))?
            .inverse_cdf(0.975);
        let half = t * (var / n as f64).sqrt();
        (mean_did - half, mean_did + half)
    } else {
        (f64::NEG_INFINITY, f64::INFINITY)
    };
    let wilcoxon_p = wilcoxon_signed_rank(&dids)?.p;
    let direction = if mean_did > 0.0 {
        1
    } else if mean_did < 0.0 {
        -1
    } else {
        0
    };
    let verdict = spec
        .expected_direction
        .map(|e| e.signum() != 0 && e.signum() == direction);
    Ok(ComparisonRun {
        result: ComparisonResult {
            mean_did,
            ci95,
            wilcoxon_p,
            n_effective: n,
            direction,
            verdict,
        },
        patients,
        eligibility,
        n_dropped,
    })
}

/// Space the model context must reserve for the forced token plus the
/// generation budget; what remains bounds the prompt.
fn prompt_budget(frozen: &FrozenModel, cfg: &GenerationConfig) -> Result<usize> {
    let reserve = cfg.max_new_tokens + 1;
    let budget = frozen.cfg.max_seq_len.saturating_sub(reserve);
    if budget < 2 {
        return Err(Error::Config(format!(
            "generation budget {} leaves no room for prompts in a context of {}",
            cfg.max_new_tokens, frozen.cfg.max_seq_len
        )));
    }
    Ok(budget)
}

/// The full incident-user pipeline: eligibility, paired arms, one DiD
/// per patient, Wilcoxon and t-CI aggregation.
pub fn incident_user_run(
    frozen: &FrozenModel,
    vocab: &Vocabulary,
    patients: &[PatientSequence],
    spec: &ComparisonSpec,
    cfg: &GenerationConfig,
    run_seed: u64,
) -> Result<ComparisonRun> {
    let budget = prompt_budget(frozen, cfg)?;
    let (prompts, eligibility) = select_eligible(patients, vocab, spec, Some(budget))?;
    run_prepared(frozen, vocab, spec, cfg, &prompts, eligibility, run_seed)
}

// ---------------------------------------------------------------------------
// Person-period conversion and the GLM secondary analysis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonPeriodRow {
    pub patient_id: u64,
    pub treated: bool,
    pub period: usize,
    /// Mean quintile (surrogate) or death indicator (mortality).
    pub outcome: f64,
}

/// Partitions each trajectory's generated portion into fixed-length
/// periods of cumulative gap time.
///
/// Surrogate outcomes produce one row per period holding at least one
/// matching reading; mortality produces one row per period spanned by
/// the trajectory, flagging the period containing [DEATH].
pub fn person_period_convert(
    trajectories: &[(u64, bool, &Trajectory)],
    vocab: &Vocabulary,
    outcome: &Outcome,
    period_days: f64,
) -> Result<Vec<PersonPeriodRow>> {
    if !(period_days > 0.0) {
        return Err(Error::Config("period_days must be > 0".into()));
    }
    let mut rows = Vec::new();
    for (patient_id, treated, traj) in trajectories {
        let tokens = traj.generated_tokens();
        let deltas = traj.generated_deltas();
        match outcome {
            Outcome::Measure(m) => {
                // period -> (sum of bins, count)
                let mut sums: std::collections::BTreeMap<usize, (f64, usize)> =
                    std::collections::BTreeMap::new();
                let mut elapsed = 0.0;
                for (t, dt) in tokens.iter().zip(deltas) {
                    elapsed += dt;
                    if is_measure_token(vocab, *t, m) {
                        if let Some(b) = vocab.kind(*t).ordinal_bin() {
                            let e = sums.entry((elapsed / period_days) as usize).or_insert((0.0, 0));
                            e.0 += b as f64;
                            e.1 += 1;
                        }
                    }
                }
                for (period, (sum, count)) in sums {
                    rows.push(PersonPeriodRow {
                        patient_id: *patient_id,
                        treated: *treated,
                        period,
                        outcome: sum / count as f64,
                    });
                }
            }
            Outcome::Mortality => {
                if tokens.is_empty() {
                    continue;
                }
                let mut elapsed = 0.0;
                let mut death_period = None;
                let mut last_period = 0usize;
                for (t, dt) in tokens.iter().zip(deltas) {
                    elapsed += dt;
                    last_period = (elapsed / period_days) as usize;
                    if *t == DEATH {
                        death_period = Some(last_period);
                        break;
                    }
                }
                for period in 0..=last_period {
                    rows.push(PersonPeriodRow {
                        patient_id: *patient_id,
                        treated: *treated,
                        period,
                        outcome: if death_period == Some(period) { 1.0 } else { 0.0 },
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Fits the person-period GLM. Surrogate outcomes are dichotomized at
/// the pooled median (the logit link needs a binary response; the
/// Wilcoxon path needs no such encoding and stays canonical).
pub fn glm_from_person_periods(rows: &[PersonPeriodRow], outcome: &Outcome) -> Result<GlmFit> {
    if rows.is_empty() {
        return Err(Error::Stats("no person-period rows to fit".into()));
    }
    let threshold = match outcome {
        Outcome::Mortality => 0.5,
        Outcome::Measure(_) => {
            let mut vals: Vec<f64> = rows.iter().map(|r| r.outcome).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = vals.len();
            if n % 2 == 1 {
                vals[n / 2]
            } else {
                (vals[n / 2 - 1] + vals[n / 2]) / 2.0
            }
        }
    };
    let glm_rows: Vec<GlmRow> = rows
        .iter()
        .map(|r| GlmRow {
            patient_id: r.patient_id,
            treated: r.treated,
            period: r.period,
            outcome: r.outcome > threshold,
        })
        .collect();
    glm_logit_cluster(&glm_rows)
}

// ---------------------------------------------------------------------------
// Prompt-shuffle ablation

/// Permutes prompt positions 2..end, each token keeping its own gap.
/// Positions 0 and 1 ([BOS] and, typically, a demographic token) stay
/// fixed. Prompts shorter than 3 come back unchanged with `false`.
pub fn prompt_shuffle(
    prompt: &PatientSequence,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (PatientSequence, bool) {
    if prompt.len() < 3 {
        return (prompt.clone(), false);
    }
    let mut pairs: Vec<(TokenId, f64)> = prompt.tokens[2..]
        .iter()
        .copied()
        .zip(prompt.deltas[2..].iter().copied())
        .collect();
    rand::seq::SliceRandom::shuffle(&mut pairs[..], rng);
    let mut tokens = prompt.tokens[..2].to_vec();
    let mut deltas = prompt.deltas[..2].to_vec();
    tokens.extend(pairs.iter().map(|p| p.0));
    deltas.extend(pairs.iter().map(|p| p.1));
    (
        PatientSequence {
            patient_id: prompt.patient_id,
            tokens,
            deltas,
        },
        true,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub ordered: ComparisonRun,
    pub shuffled: ComparisonRun,
    /// |ordered DiD| / |shuffled DiD|.
    pub ratio: f64,
    /// Shuffled DiD was exactly zero; ratio reported as infinite.
    pub shuffled_null: bool,
    /// Prompts too short to shuffle (passed through unchanged).
    pub n_unshuffled: usize,
}

/// Runs the pipeline on ordered and on within-patient shuffled prompts
/// with shared patients and generation seeds, and reports the
/// DiD-magnitude ratio. Effects that survive shuffling (ratio near 1)
/// are cross-sectional; effects that collapse (ratio well above 1)
/// depended on longitudinal order.
pub fn ablation_run(
    frozen: &FrozenModel,
    vocab: &Vocabulary,
    patients: &[PatientSequence],
    spec: &ComparisonSpec,
    cfg: &GenerationConfig,
    run_seed: u64,
) -> Result<AblationResult> {
    let budget = prompt_budget(frozen, cfg)?;
    let (prompts, eligibility) = select_eligible(patients, vocab, spec, Some(budget))?;

    let mut n_unshuffled = 0usize;
    let shuffled_prompts: Vec<PatientSequence> = prompts
        .iter()
        .map(|p| {
            let mut rng = rng_at(run_seed, &[stream::SHUFFLE, p.patient_id]);
            let (s, changed) = prompt_shuffle(p, &mut rng);
            if !changed {
                n_unshuffled += 1;
            }
            s
        })
        .collect();

    let ordered = run_prepared(
        frozen,
        vocab,
        spec,
        cfg,
        &prompts,
        eligibility.clone(),
        run_seed,
    )?;
    let shuffled = run_prepared(
        frozen,
        vocab,
        spec,
        cfg,
        &shuffled_prompts,
        eligibility,
        run_seed,
    )?;

    let shuffled_null = shuffled.result.mean_did == 0.0;
    let ratio = if shuffled_null {
        f64::INFINITY
    } else {
        ordered.result.mean_did.abs() / shuffled.result.mean_did.abs()
    };
    Ok(AblationResult {
        ordered,
        shuffled,
        ratio,
        shuffled_null,
        n_unshuffled,
    })
}
