//! The full trajectory-fidelity workflow: train a small model, generate
//! continuations from held-out prompts, and score the generated pool
//! against the real continuations. Prints the rendered metric table with
//! the model / unigram / bigram perplexity triple filled in.

use std::collections::BTreeMap;

use clinseq::baselines::{fit_bigram, fit_unigram};
use clinseq::cohort::{assign_splits, PatientSequence, Split};
use clinseq::generator::{generate, GenerationConfig};
use clinseq::metrics::{fidelity_report, render_table};
use clinseq::model::{teacher_forcing_perplexity, FrozenModel, Model, ModelConfig};
use clinseq::rng::{rng_at, stream};
use clinseq::synth::{generate_cohort, CohortConfig, TimingConfig};
use clinseq::trainer::{TrainConfig, Trainer};
use clinseq::vocab::{build_vocabulary, TokenId};

const PROMPT_LEN: usize = 4;

fn main() -> clinseq::Result<()> {
    let cohort_cfg = CohortConfig {
        n_patients: 800,
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
        seed: 23,
    };
    let (cohort, _) = generate_cohort(&cohort_cfg)?;
    let vocab = build_vocabulary(&cohort_cfg.vocab_recipe())?;
    let splits = assign_splits(cohort.len(), 0.85, 0.0, 23);
    let train: Vec<PatientSequence> = cohort
        .iter()
        .zip(&splits)
        .filter(|(_, s)| **s == Split::Train)
        .map(|(p, _)| p.clone())
        .collect();
    let test: Vec<PatientSequence> = cohort
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
    let mut cfg = TrainConfig::pretrain(500, 1);
    cfg.batch_size = 16;
    cfg.warmup_steps = 50;
    cfg.val_every = 0;
    cfg.checkpoint_every = 0;
    let mut trainer = Trainer::new(model, vocab.clone(), cfg)?;
    trainer.train(&train, &[], |_| Ok(()), |_| Ok(()))?;
    let (trained, _) = trainer.checkpoint().restore_model()?;
    let frozen = FrozenModel::from_model(&trained)?;
    println!(
        "trained on {} patients, scoring against {} held-out continuations\n",
        train.len(),
        test.len()
    );

    // One generated continuation per held-out prompt.
    let gen_cfg = GenerationConfig {
        max_new_tokens: 60,
        ..GenerationConfig::default()
    };
    let mut generated = Vec::with_capacity(test.len());
    for p in &test {
        let prompt = PatientSequence {
            patient_id: p.patient_id,
            tokens: p.tokens[..PROMPT_LEN].to_vec(),
            deltas: p.deltas[..PROMPT_LEN].to_vec(),
        };
        let mut rng = rng_at(23, &[stream::EVAL, p.patient_id]);
        generated.push(generate(&frozen, &vocab, &prompt, None, &gen_cfg, &mut rng)?.seq);
    }

    // Compare continuations only; the prompt is shared by construction.
    let gen_tokens: Vec<&[TokenId]> = generated.iter().map(|g| &g.tokens[PROMPT_LEN..]).collect();
    let ref_tokens: Vec<&[TokenId]> = test.iter().map(|r| &r.tokens[PROMPT_LEN..]).collect();
    let gen_dts: Vec<f64> = generated
        .iter()
        .flat_map(|g| g.deltas[PROMPT_LEN..].to_vec())
        .collect();
    let ref_dts: Vec<f64> = test
        .iter()
        .flat_map(|r| r.deltas[PROMPT_LEN..].to_vec())
        .collect();

    let mut report = fidelity_report(&gen_tokens, &gen_dts, &ref_tokens, &ref_dts, &vocab)?;
    report.model_ppl = Some(teacher_forcing_perplexity(&frozen, &test)?);
    report.unigram_ppl = Some(teacher_forcing_perplexity(
        &fit_unigram(&vocab, &train)?,
        &test,
    )?);
    report.bigram_ppl = Some(teacher_forcing_perplexity(
        &fit_bigram(&vocab, &train)?,
        &test,
    )?);

    print!("{}", render_table(&report));

    let model_ppl = report.model_ppl.unwrap();
    let unigram_ppl = report.unigram_ppl.unwrap();
    if report.type_jaccard_pooled > 0.5 && model_ppl < unigram_ppl {
        println!("\nPASS: generated pool overlaps the reference and the model beats the unigram");
        Ok(())
    } else {
        Err(clinseq::Error::Stats(format!(
            "fidelity too weak: jaccard {:.3}, model ppl {model_ppl:.2} vs unigram {unigram_ppl:.2}",
            report.type_jaccard_pooled
        )))
    }
}
