//! Prompt-shuffle ablation: does the model exploit the ORDER of a
//! patient's history, or just its contents? Two effects are planted, one
//! gated on recent severity (state-dependent) and one unconditional.
//! Shuffling the prompt destroys the recency structure, so the
//! state-dependent association should collapse under shuffling (ratio
//! well above 1) while the unconditional one survives (ratio near 1).

use std::collections::BTreeMap;

use clinseq::generator::GenerationConfig;
use clinseq::model::{FrozenModel, Model, ModelConfig};
use clinseq::rng::{rng_at, stream};
use clinseq::stats::{ablation_run, ComparisonSpec, Outcome};
use clinseq::synth::{generate_cohort, CohortConfig, EffectSpec, TimingConfig};
use clinseq::trainer::{TrainConfig, Trainer};
use clinseq::vocab::{build_vocabulary, Vocabulary};

fn spec(vocab: &Vocabulary, treat: &str, measure: &str) -> clinseq::Result<ComparisonSpec> {
    Ok(ComparisonSpec {
        treat_token: vocab
            .id(treat)
            .ok_or_else(|| clinseq::Error::Vocab(format!("{treat} missing")))?,
        control_token: vocab
            .id("MED:C2")
            .ok_or_else(|| clinseq::Error::Vocab("MED:C2 missing".into()))?,
        outcome: Outcome::Measure(measure.into()),
        window_days: 365.0,
        n_patients: 80,
        n_per_arm: 4,
        baseline_k: 5,
        expected_direction: Some(1),
    })
}

fn main() -> clinseq::Result<()> {
    let cohort_cfg = CohortConfig {
        n_patients: 3000,
        n_measures: 3,
        n_med_classes: 3,
        n_dx: 2,
        seq_len: (40, 60),
        timing: TimingConfig {
            p_zero: 0.25,
            mu_t: 2.0,
            sigma_t: 1.0,
        },
        p_drug_decision: 0.20,
        p_dx: 0.05,
        effects: vec![
            EffectSpec {
                drug_class: "C0".into(),
                measure: "M1".into(),
                delta_quintiles: 2.0,
                state_dependent: true,
                onset_lag_days: 0.0,
            },
            EffectSpec {
                drug_class: "C1".into(),
                measure: "M2".into(),
                delta_quintiles: 1.5,
                state_dependent: false,
                onset_lag_days: 0.0,
            },
        ],
        confounding: BTreeMap::from([
            ("C0".into(), 1.0),
            ("C1".into(), 1.0),
            ("C2".into(), 1.0),
        ]),
        recency_slope: 1.0,
        mortality_hazard_slope: 0.5,
        seed: 37,
    };
    let (cohort, _) = generate_cohort(&cohort_cfg)?;
    let vocab = build_vocabulary(&cohort_cfg.vocab_recipe())?;
    println!(
        "cohort: {} patients; MED:C0 -> LAB:M1 gated on recent severity, MED:C1 -> LAB:M2 unconditional",
        cohort.len()
    );

    let model = Model::new(
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 96,
        },
        &vocab,
        &mut rng_at(1, &[stream::INIT]),
    )?;
    // No scheduled sampling: it dilutes drug-outcome conditionals (see
    // the drug_effect_test example), and this probe needs them crisp.
    let mut cfg = TrainConfig::pretrain(1800, 1);
    cfg.batch_size = 16;
    cfg.warmup_steps = 100;
    cfg.scheduled_sampling = None;
    cfg.val_every = 0;
    cfg.checkpoint_every = 0;
    let mut trainer = Trainer::new(model, vocab.clone(), cfg)?;
    println!("training 1800 steps...");
    trainer.train(&cohort, &[], |_| Ok(()), |_| Ok(()))?;
    let (trained, _) = trainer.checkpoint().restore_model()?;
    let frozen = FrozenModel::from_model(&trained)?;

    let gen_cfg = GenerationConfig {
        temperature: 0.8,
        max_new_tokens: 60,
        ..GenerationConfig::default()
    };
    for (label, treat, measure, state_dep) in [
        ("state-dependent", "MED:C0", "LAB:M1", true),
        ("unconditional  ", "MED:C1", "LAB:M2", false),
    ] {
        let spec = spec(&vocab, treat, measure)?;
        let ab = ablation_run(&frozen, &vocab, &cohort, &spec, &gen_cfg, 37)?;
        println!(
            "\n{label} ({treat} -> {measure}):\n  ordered  DiD {:+.3} (p {:.2e})\n  shuffled DiD {:+.3} (p {:.2e})\n  ratio {:.2}{}",
            ab.ordered.result.mean_did,
            ab.ordered.result.wilcoxon_p,
            ab.shuffled.result.mean_did,
            ab.shuffled.result.wilcoxon_p,
            ab.ratio,
            if ab.shuffled_null { "  (shuffled effect is null)" } else { "" }
        );
        let collapsed = ab.shuffled_null || ab.ratio > 1.3;
        if state_dep && !collapsed {
            return Err(clinseq::Error::Stats(
                "state-dependent effect survived prompt shuffling".into(),
            ));
        }
        if !state_dep && collapsed && ab.ordered.result.mean_did > 0.0 {
            return Err(clinseq::Error::Stats(
                "unconditional effect collapsed under prompt shuffling".into(),
            ));
        }
    }
    println!("\nPASS: shuffling kills only the order-dependent association");
    Ok(())
}
