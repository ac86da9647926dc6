//! Verifies the autodiff engine end to end: analytic gradients of the
//! combined training loss (weighted cross-entropy + ZILN + ordinal EMD)
//! against central finite differences, for every parameter tensor of a
//! 2-layer model. This is the same check the test suite runs; here it
//! prints the per-tensor worst relative errors.

use std::collections::BTreeMap;

use clinseq::cohort::PatientSequence;
use clinseq::model::{Batch, Model, ModelConfig};
use clinseq::numerics::check_gradients;
use clinseq::rng::{rng_at, stream};
use clinseq::synth::{generate_cohort, CohortConfig, TimingConfig};
use clinseq::vocab::build_vocabulary;

fn main() -> clinseq::Result<()> {
    let cfg = CohortConfig {
        n_patients: 4,
        n_measures: 2,
        n_med_classes: 1,
        n_dx: 2,
        seq_len: (8, 12),
        timing: TimingConfig {
            p_zero: 0.3,
            mu_t: 2.0,
            sigma_t: 1.0,
        },
        p_drug_decision: 0.15,
        p_dx: 0.10,
        effects: vec![],
        confounding: BTreeMap::new(),
        recency_slope: 0.0,
        mortality_hazard_slope: 0.0,
        seed: 7,
    };
    let (cohort, _) = generate_cohort(&cfg)?;
    let vocab = build_vocabulary(&cfg.vocab_recipe())?;

    let model = Model::new(
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
        },
        &vocab,
        &mut rng_at(1, &[stream::INIT]),
    )?;
    println!(
        "model: {} parameters across {} tensors, vocabulary {}",
        model.param_count(),
        model.named_params().len(),
        vocab.len()
    );

    let refs: Vec<&PatientSequence> = cohort.iter().collect();
    let batch = Batch::from_sequences(&vocab, &refs, 32)?;
    let report = check_gradients(
        &model.named_params(),
        || Ok(model.loss(&batch)?.total),
        1e-4,
    )?;

    println!("{:<28} worst rel err", "tensor");
    for (name, err) in &report.per_tensor {
        println!("{name:<28} {err:.3e}");
    }
    println!(
        "max {:.3e} at {}",
        report.max_rel_err,
        report.worst_tensor.as_deref().unwrap_or("-")
    );
    if report.passes(1e-3) {
        println!("PASS: every tensor within 1e-3 of finite differences");
        Ok(())
    } else {
        Err(clinseq::Error::Numerics {
            op: "check_gradients",
            reason: format!("worst relative error {:.3e}", report.max_rel_err),
        })
    }
}
