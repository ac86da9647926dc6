//! Generates a small synthetic cohort with one planted drug effect,
//! prints a few decoded patient timelines, and recovers the planted
//! shift directly from the data (no model involved) as a sanity check
//! that the generative law actually encodes what the ledger claims.

use std::collections::BTreeMap;

use clinseq::cohort::decode_sequence;
use clinseq::synth::{
    direct_contrast, generate_cohort, CohortConfig, EffectSpec, TimingConfig,
};
use clinseq::vocab::build_vocabulary;

fn main() -> clinseq::Result<()> {
    let cfg = CohortConfig {
        n_patients: 2000,
        n_measures: 4,
        n_med_classes: 3,
        n_dx: 5,
        seq_len: (25, 45),
        timing: TimingConfig {
            p_zero: 0.25,
            mu_t: 2.2,
            sigma_t: 1.1,
        },
        p_drug_decision: 0.15,
        p_dx: 0.10,
        effects: vec![EffectSpec {
            drug_class: "C0".into(),
            measure: "M1".into(),
            delta_quintiles: 1.0,
            state_dependent: false,
            onset_lag_days: 0.0,
        }],
        confounding: BTreeMap::from([("C0".into(), 0.8)]),
        recency_slope: 0.5,
        mortality_hazard_slope: 1.0,
        seed: 42,
    };
    let (cohort, ledger) = generate_cohort(&cfg)?;
    let vocab = build_vocabulary(&cfg.vocab_recipe())?;

    let total_tokens: usize = cohort.iter().map(|p| p.len()).sum();
    let deaths = cohort
        .iter()
        .filter(|p| p.tokens.last() == vocab.id("DEATH").as_ref())
        .count();
    println!(
        "cohort: {} patients, {} tokens, vocabulary {}, deaths {}",
        cohort.len(),
        total_tokens,
        vocab.len(),
        deaths
    );

    // A couple of decoded timelines, truncated for readability.
    for patient in cohort.iter().take(2) {
        let raw = decode_sequence(&vocab, patient);
        println!("\npatient {}:", raw.patient_id);
        for (tok, dt) in raw.tokens.iter().zip(&raw.deltas_days).take(14) {
            println!("  +{dt:>6.1}d  {tok}");
        }
        if raw.tokens.len() > 14 {
            println!("  ... {} more events", raw.tokens.len() - 14);
        }
    }

    println!("\nplanted effects (ground-truth ledger):");
    for e in &ledger.effects {
        println!(
            "  {} -> {}: {:+.1} quintiles, state_dependent={}, lag {}d",
            e.drug_token, e.measure_key, e.delta_quintiles, e.state_dependent, e.onset_lag_days
        );
    }

    // Model-free recovery: within-patient post-minus-pre contrast around
    // first exposure. The planted +1.0 shows up attenuated (quintile
    // clipping, pre-existing severity) but unmistakably positive.
    println!("\ndirect contrast from the raw cohort:");
    for row in direct_contrast(&cohort, &vocab, &ledger)? {
        println!(
            "  {} -> {}: mean shift {:+.3} over {} patients ({} post events), p = {:.2e}",
            row.drug_class, row.measure_key, row.mean_shift, row.n_patients, row.n_post_events, row.p
        );
        if row.mean_shift <= 0.0 || row.p > 1e-3 {
            return Err(clinseq::Error::Stats(
                "planted effect did not surface in the raw data".into(),
            ));
        }
    }
    println!("\nPASS: planted effect recovered from raw sequences");
    Ok(())
}
