//! Privacy probe: generates trajectories from a trained model and finds
//! each one's nearest neighbour in the training corpus by token-set
//! Jaccard. Verbatim regurgitation would show up as a max of 1.0;
//! healthy generalization sits well below that, above the random-pair
//! floor (the model should resemble its corpus more than chance, just
//! not copy it).

use std::collections::BTreeMap;

use clinseq::cohort::PatientSequence;
use clinseq::generator::{generate, GenerationConfig};
use clinseq::metrics::nn_memorisation;
use clinseq::model::{FrozenModel, Model, ModelConfig};
use clinseq::rng::{rng_at, stream};
use clinseq::synth::{generate_cohort, CohortConfig, TimingConfig};
use clinseq::trainer::{TrainConfig, Trainer};
use clinseq::vocab::{build_vocabulary, TokenId};

fn main() -> clinseq::Result<()> {
    let cohort_cfg = CohortConfig {
        n_patients: 600,
        n_measures: 3,
        n_med_classes: 2,
        n_dx: 4,
        seq_len: (20, 35),
        timing: TimingConfig {
            p_zero: 0.25,
            mu_t: 2.0,
            sigma_t: 1.0,
        },
        p_drug_decision: 0.15,
        p_dx: 0.10,
        effects: vec![],
        confounding: BTreeMap::new(),
        recency_slope: 0.0,
        mortality_hazard_slope: 0.5,
        seed: 31,
    };
    let (cohort, _) = generate_cohort(&cohort_cfg)?;
    let vocab = build_vocabulary(&cohort_cfg.vocab_recipe())?;

    let model = Model::new(
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
        },
        &vocab,
        &mut rng_at(1, &[stream::INIT]),
    )?;
    let mut cfg = TrainConfig::pretrain(400, 1);
    cfg.batch_size = 16;
    cfg.warmup_steps = 50;
    cfg.val_every = 0;
    cfg.checkpoint_every = 0;
    let mut trainer = Trainer::new(model, vocab.clone(), cfg)?;
    trainer.train(&cohort, &[], |_| Ok(()), |_| Ok(()))?;
    let (trained, _) = trainer.checkpoint().restore_model()?;
    let frozen = FrozenModel::from_model(&trained)?;

    // 100 rollouts from training-prefix prompts: the worst case for
    // regurgitation, since the model saw these exact openings.
    let gen_cfg = GenerationConfig {
        max_new_tokens: 40,
        ..GenerationConfig::default()
    };
    let mut generated: Vec<PatientSequence> = Vec::new();
    for p in cohort.iter().take(100) {
        let prompt = PatientSequence {
            patient_id: p.patient_id,
            tokens: p.tokens[..4].to_vec(),
            deltas: p.deltas[..4].to_vec(),
        };
        let mut rng = rng_at(31, &[stream::MEMCHECK, p.patient_id]);
        generated.push(generate(&frozen, &vocab, &prompt, None, &gen_cfg, &mut rng)?.seq);
    }

    let gen_sets: Vec<&[TokenId]> = generated.iter().map(|g| g.tokens.as_slice()).collect();
    let train_sets: Vec<&[TokenId]> = cohort.iter().map(|p| p.tokens.as_slice()).collect();
    let report = nn_memorisation(
        &gen_sets,
        &train_sets,
        &mut rng_at(31, &[stream::MEMCHECK]),
    )?;

    println!(
        "nearest-neighbour Jaccard over {} generated vs {} training patients:",
        report.n_generated, report.n_training
    );
    println!("  mean NN        {:.4}", report.mean_nn_jaccard);
    println!("  max NN         {:.4}", report.max_nn_jaccard);
    println!("  random pairs   {:.4}", report.random_pair_baseline);

    if report.max_nn_jaccard < 1.0 && report.mean_nn_jaccard > report.random_pair_baseline {
        println!("\nPASS: no verbatim copies, and generations resemble the corpus above chance");
        Ok(())
    } else {
        Err(clinseq::Error::Stats(format!(
            "memorization check failed: max {:.4}, mean {:.4}, baseline {:.4}",
            report.max_nn_jaccard, report.mean_nn_jaccard, report.random_pair_baseline
        )))
    }
}
