//! Transfer to a shifted site. Pretrains on site A, then confronts the
//! model with site B: same vocabulary, different event mix (triple the
//! diagnosis rate, a third of the prescribing, slower visit cadence).
//! Fine-tuning on site B's training split should claw back most of the
//! zero-shot perplexity gap and sharpen generated continuations.

use std::collections::BTreeMap;

use clinseq::cohort::{assign_splits, PatientSequence, Split};
use clinseq::generator::{generate, GenerationConfig};
use clinseq::metrics::type_jaccard_per_patient;
use clinseq::model::{teacher_forcing_perplexity, FrozenModel, Model, ModelConfig};
use clinseq::rng::{rng_at, stream};
use clinseq::synth::{generate_cohort, CohortConfig, TimingConfig};
use clinseq::trainer::{TrainConfig, Trainer};
use clinseq::vocab::{build_vocabulary, TokenId, Vocabulary};

const PROMPT_LEN: usize = 4;

fn site(seed: u64, p_drug: f64, p_dx: f64, timing: TimingConfig) -> CohortConfig {
    CohortConfig {
        n_patients: 1200,
        n_measures: 3,
        n_med_classes: 2,
        n_dx: 4,
        seq_len: (20, 35),
        timing,
        p_drug_decision: p_drug,
        p_dx,
        effects: vec![],
        confounding: BTreeMap::new(),
        recency_slope: 0.0,
        mortality_hazard_slope: 0.5,
        seed,
    }
}

fn jaccard_vs_refs(
    frozen: &FrozenModel,
    vocab: &Vocabulary,
    refs: &[PatientSequence],
    seed: u64,
) -> clinseq::Result<f64> {
    let gen_cfg = GenerationConfig {
        max_new_tokens: 40,
        ..GenerationConfig::default()
    };
    let mut generated = Vec::with_capacity(refs.len());
    for p in refs {
        let prompt = PatientSequence {
            patient_id: p.patient_id,
            tokens: p.tokens[..PROMPT_LEN].to_vec(),
            deltas: p.deltas[..PROMPT_LEN].to_vec(),
        };
        let mut rng = rng_at(seed, &[stream::EVAL, p.patient_id]);
        generated.push(generate(frozen, vocab, &prompt, None, &gen_cfg, &mut rng)?.seq);
    }
    let pairs: Vec<(&[TokenId], &[TokenId])> = generated
        .iter()
        .zip(refs)
        .map(|(g, r)| (&g.tokens[PROMPT_LEN..], &r.tokens[PROMPT_LEN..]))
        .map(|(g, r)| (g as &[TokenId], r as &[TokenId]))
        .collect();
    type_jaccard_per_patient(&pairs)
}

fn train_on(
    model: Model,
    vocab: &Vocabulary,
    seqs: &[PatientSequence],
    mut cfg: TrainConfig,
) -> clinseq::Result<Model> {
    cfg.val_every = 0;
    cfg.checkpoint_every = 0;
    let mut trainer = Trainer::new(model, vocab.clone(), cfg)?;
    trainer.train(seqs, &[], |_| Ok(()), |_| Ok(()))?;
    Ok(trainer.checkpoint().restore_model()?.0)
}

fn main() -> clinseq::Result<()> {
    let site_a = site(
        41,
        0.15,
        0.10,
        TimingConfig {
            p_zero: 0.25,
            mu_t: 2.0,
            sigma_t: 1.0,
        },
    );
    let site_b = site(
        43,
        0.05,
        0.30,
        TimingConfig {
            p_zero: 0.40,
            mu_t: 2.6,
            sigma_t: 1.1,
        },
    );
    let (cohort_a, _) = generate_cohort(&site_a)?;
    let (cohort_b, _) = generate_cohort(&site_b)?;
    // Same counts, same recipe: the vocabulary transfers unchanged.
    let vocab = build_vocabulary(&site_a.vocab_recipe())?;

    let splits = assign_splits(cohort_b.len(), 0.8, 0.0, 43);
    let b_train: Vec<PatientSequence> = cohort_b
        .iter()
        .zip(&splits)
        .filter(|(_, s)| **s == Split::Train)
        .map(|(p, _)| p.clone())
        .collect();
    let b_test: Vec<PatientSequence> = cohort_b
        .iter()
        .zip(&splits)
        .filter(|(p, s)| **s == Split::Test && p.len() > PROMPT_LEN + 1)
        .map(|(p, _)| p.clone())
        .collect();

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
    let mut pre_cfg = TrainConfig::pretrain(800, 1);
    pre_cfg.batch_size = 16;
    pre_cfg.warmup_steps = 100;
    println!("pretraining on site A ({} patients)...", cohort_a.len());
    let pretrained = train_on(model, &vocab, &cohort_a, pre_cfg)?;

    let frozen_a = FrozenModel::from_model(&pretrained)?;
    let ppl_a_on_a = teacher_forcing_perplexity(&frozen_a, &cohort_a)?;
    let zero_shot_ppl = teacher_forcing_perplexity(&frozen_a, &b_test)?;
    let zero_shot_jac = jaccard_vs_refs(&frozen_a, &vocab, &b_test, 41)?;

    let mut ft_cfg = TrainConfig::fine_tune(1);
    ft_cfg.total_steps = 400;
    ft_cfg.batch_size = 16;
    println!("fine-tuning on site B ({} patients)...", b_train.len());
    let adapted = train_on(pretrained, &vocab, &b_train, ft_cfg)?;
    let frozen_b = FrozenModel::from_model(&adapted)?;
    let adapted_ppl = teacher_forcing_perplexity(&frozen_b, &b_test)?;
    let adapted_jac = jaccard_vs_refs(&frozen_b, &vocab, &b_test, 41)?;

    println!("\nsite A model on site A:        ppl {ppl_a_on_a:.2}");
    println!(
        "site A model on site B:        ppl {zero_shot_ppl:.2}   per-patient Jaccard {zero_shot_jac:.3}"
    );
    println!(
        "fine-tuned model on site B:    ppl {adapted_ppl:.2}   per-patient Jaccard {adapted_jac:.3}"
    );

    if adapted_ppl < zero_shot_ppl {
        println!(
            "\nPASS: fine-tuning recovered {:.0}% of the zero-shot perplexity gap",
            100.0 * (zero_shot_ppl - adapted_ppl) / (zero_shot_ppl - ppl_a_on_a).max(1e-9)
        );
        Ok(())
    } else {
        Err(clinseq::Error::Training(format!(
            "fine-tuning did not help: {adapted_ppl:.2} vs zero-shot {zero_shot_ppl:.2}"
        )))
    }
}
