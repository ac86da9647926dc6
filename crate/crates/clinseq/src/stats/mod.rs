//! Pharmacological association analysis on generated trajectories.
//!
//! The centerpiece is an incident-user pipeline: anchor each patient at
//! their first exposure to the treatment drug, cut the prompt there,
//! generate paired forced-intervention arms, and reduce each patient to
//! a single difference-in-differences observation. Inference is rank
//! based (Wilcoxon signed-rank over patient DiDs) with a permutation
//! test across comparisons and a person-period GLM as a secondary
//! check. A prompt-shuffle ablation probes whether detected effects
//! depend on longitudinal ordering.

mod glm;
mod permutation;
mod pipeline;
mod wilcoxon;

pub use glm::{glm_logit_cluster, GlmFit, GlmRow};
pub use permutation::permutation_test;
pub use pipeline::{
    ablation_run, baseline_of, glm_from_person_periods, incident_user_run, person_period_convert,
    prompt_shuffle, select_eligible, AblationResult, ComparisonResult, ComparisonRun,
    ComparisonSpec, EligibilityReport, Outcome, PatientResult, PersonPeriodRow,
};
pub use wilcoxon::{wilcoxon_signed_rank, WilcoxonResult};
