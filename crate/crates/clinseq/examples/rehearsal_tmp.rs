//! Scratch dress rehearsal of the acceptance fixture. Not part of the suite.

use std::collections::BTreeMap;
use std::time::Instant;

use clinseq::baselines::{fit_bigram, fit_unigram, BaselineSampler};
use clinseq::cohort::{assign_splits, PatientSequence, Split};
use clinseq::generator::{generate, GenerationConfig};
use clinseq::metrics::{fidelity_report, ks_statistic, nn_memorisation, type_jaccard_per_patient};
use clinseq::model::{teacher_forcing_perplexity, FrozenModel, Model, ModelConfig};
use clinseq::rng::{rng_at, stream};
use clinseq::stats::{ablation_run, incident_user_run, ComparisonSpec, Outcome};
use clinseq::synth::{generate_cohort, CohortConfig, EffectSpec, TimingConfig};
use clinseq::trainer::{TrainConfig, Trainer};
use clinseq::vocab::{build_vocabulary, TokenId, Vocabulary};
use rand::seq::SliceRandom;

const PROMPT_LEN: usize = 4;

fn site_a() -> CohortConfig {
    CohortConfig {
        n_patients: 5000,
        n_measures: 3,
        n_med_classes: 4,
        n_dx: 8,
        seq_len: (30, 50),
        timing: TimingConfig { p_zero: 0.25, mu_t: 2.0, sigma_t: 1.0 },
        p_drug_decision: 0.20,
        p_dx: 0.08,
        effects: vec![
            EffectSpec {
                drug_class: "C0".into(),
                measure: "M1".into(),
                delta_quintiles: 1.0,
                state_dependent: false,
                onset_lag_days: 0.0,
            },
            EffectSpec {
                drug_class: "C1".into(),
                measure: "M2".into(),
                delta_quintiles: 1.5,
                state_dependent: true,
                onset_lag_days: 0.0,
            },
        ],
        confounding: BTreeMap::from([
            ("C0".into(), 0.3),
            ("C1".into(), 1.0),
            ("C2".into(), 0.8),
            ("C3".into(), 0.8),
        ]),
        recency_slope: 1.0,
        mortality_hazard_slope: 0.5,
        seed: 1001,
    }
}

fn site_b() -> CohortConfig {
    let mut cfg = site_a();
    cfg.n_patients = 1000;
    cfg.p_dx = 0.30;
    cfg.p_drug_decision = 0.05;
    cfg.timing = TimingConfig { p_zero: 0.40, mu_t: 2.6, sigma_t: 1.1 };
    cfg.seed = 2002;
    cfg
}

fn spec(
    vocab: &Vocabulary,
    treat: &str,
    control: &str,
    outcome: &str,
    n: usize,
    per_arm: usize,
    window: f64,
) -> ComparisonSpec {
    ComparisonSpec {
        treat_token: vocab.id(treat).unwrap(),
        control_token: vocab.id(control).unwrap(),
        outcome: Outcome::Measure(outcome.into()),
        window_days: window,
        n_patients: n,
        n_per_arm: per_arm,
        baseline_k: 5,
        expected_direction: Some(1),
    }
}

fn by_split(cohort: &[PatientSequence], splits: &[Split], which: Split) -> Vec<PatientSequence> {
    cohort
        .iter()
        .zip(splits)
        .filter(|(_, s)| **s == which)
        .map(|(p, _)| p.clone())
        .collect()
}

fn gen_pool(
    frozen: &FrozenModel,
    vocab: &Vocabulary,
    refs: &[PatientSequence],
    seed: u64,
    max_new: usize,
) -> clinseq::Result<Vec<PatientSequence>> {
    let gen_cfg = GenerationConfig { max_new_tokens: max_new, ..GenerationConfig::default() };
    refs.iter()
        .map(|p| {
            let prompt = PatientSequence {
                patient_id: p.patient_id,
                tokens: p.tokens[..PROMPT_LEN].to_vec(),
                deltas: p.deltas[..PROMPT_LEN].to_vec(),
            };
            let mut rng = rng_at(seed, &[stream::EVAL, p.patient_id]);
            Ok(generate(frozen, vocab, &prompt, None, &gen_cfg, &mut rng)?.seq)
        })
        .collect()
}

fn main() -> clinseq::Result<()> {
    let t0 = Instant::now();
    let el = |t0: &Instant| format!("[{:>5.0}s]", t0.elapsed().as_secs_f64());

    let cfg_a = site_a();
    let (cohort, _) = generate_cohort(&cfg_a)?;
    let vocab = build_vocabulary(&cfg_a.vocab_recipe())?;
    let splits = assign_splits(cohort.len(), 0.85, 0.05, cfg_a.seed);
    let train = by_split(&cohort, &splits, Split::Train);
    let test: Vec<PatientSequence> = by_split(&cohort, &splits, Split::Test)
        .into_iter()
        .filter(|p| p.len() > PROMPT_LEN + 1)
        .collect();
    println!(
        "{} cohort {} patients ({} train, {} test), vocab {}",
        el(&t0), cohort.len(), train.len(), test.len(), vocab.len()
    );

    let model = Model::new(ModelConfig::desk(), &vocab, &mut rng_at(1, &[stream::INIT]))?;
    let mut tc = TrainConfig::pretrain(8000, 1);
    tc.batch_size = 16;
    tc.warmup_steps = 200;
    tc.scheduled_sampling = None;
    tc.val_every = 0;
    tc.checkpoint_every = 0;
    let mut trainer = Trainer::new(model, vocab.clone(), tc)?;
    trainer.train(&train, &[], |r| {
        if r.step % 2000 == 0 {
            println!("{} step {} loss {:.3}", el(&t0), r.step, r.loss);
        }
        Ok(())
    }, |_| Ok(()))?;
    let (trained, _) = trainer.checkpoint().restore_model()?;
    let frozen = FrozenModel::from_model(&trained)?;
    println!("{} trained", el(&t0));

    // ---- criterion 6: planted effect, N=200, 100 per arm
    let s6 = spec(&vocab, "MED:C0", "MED:C2", "LAB:M1", 200, 100, 365.0);
    let g6 = GenerationConfig { max_new_tokens: 60, ..GenerationConfig::default() };
    let run6 = incident_user_run(&frozen, &vocab, &cohort, &s6, &g6, 1001)?;
    let r = &run6.result;
    println!(
        "{} C6 effect: DiD {:+.4} CI [{:+.4},{:+.4}] p {:.3e} n {} (sel {} of {})",
        el(&t0), r.mean_did, r.ci95.0, r.ci95.1, r.wilcoxon_p, r.n_effective,
        run6.eligibility.selected, run6.eligibility.n_scanned
    );

    // ---- criterion 6 null calibration: 50 reps of C3 vs C2 -> M1
    let mut null_ps = Vec::with_capacity(50);
    for rep in 0..50u64 {
        let mut view = cohort.clone();
        let mut rng = rng_at(1001, &[stream::PERMUTATION, rep]);
        view.shuffle(&mut rng);
        let sn = spec(&vocab, "MED:C3", "MED:C2", "LAB:M1", 60, 2, 365.0);
        let run = incident_user_run(&frozen, &vocab, &view, &sn, &g6, 5000 + rep)?;
        null_ps.push(run.result.wilcoxon_p);
    }
    let n_above = null_ps.iter().filter(|p| **p > 0.05).count();
    let grid: Vec<f64> = (0..2000).map(|i| (i as f64 + 0.5) / 2000.0).collect();
    let ks = ks_statistic(&null_ps, &grid);
    let n_eff: f64 = (50.0 * 2000.0) / 2050.0;
    println!(
        "{} C6 null: {}/50 with p>0.05, KS {:.4} (crit {:.4}); min p {:.4}",
        el(&t0), n_above, ks, 1.628 / n_eff.sqrt(),
        null_ps.iter().cloned().fold(f64::INFINITY, f64::min)
    );

    // ---- criterion 7: ablation ratios, short window
    let s7a = spec(&vocab, "MED:C1", "MED:C2", "LAB:M2", 150, 8, 90.0);
    let ab_dep = ablation_run(&frozen, &vocab, &cohort, &s7a, &g6, 1001)?;
    println!(
        "{} C7 state-dep: ordered {:+.4} (p {:.2e}) shuffled {:+.4} ratio {:.3} null={} n_unshuf {}",
        el(&t0), ab_dep.ordered.result.mean_did, ab_dep.ordered.result.wilcoxon_p,
        ab_dep.shuffled.result.mean_did, ab_dep.ratio, ab_dep.shuffled_null, ab_dep.n_unshuffled
    );
    let s7b = spec(&vocab, "MED:C0", "MED:C2", "LAB:M1", 150, 8, 90.0);
    let ab_ind = ablation_run(&frozen, &vocab, &cohort, &s7b, &g6, 1001)?;
    println!(
        "{} C7 state-indep: ordered {:+.4} (p {:.2e}) shuffled {:+.4} ratio {:.3} null={}",
        el(&t0), ab_ind.ordered.result.mean_did, ab_ind.ordered.result.wilcoxon_p,
        ab_ind.shuffled.result.mean_did, ab_ind.ratio, ab_ind.shuffled_null
    );

    // ---- criteria 4/5
    let refs: Vec<PatientSequence> = test.iter().take(200).cloned().collect();
    let generated = gen_pool(&frozen, &vocab, &refs, 1001, 60)?;
    let gen_tokens: Vec<&[TokenId]> = generated.iter().map(|g| &g.tokens[PROMPT_LEN..]).collect();
    let ref_tokens: Vec<&[TokenId]> = refs.iter().map(|p| &p.tokens[PROMPT_LEN..]).collect();
    let gen_dts: Vec<f64> = generated.iter().flat_map(|g| g.deltas[PROMPT_LEN..].to_vec()).collect();
    let ref_dts: Vec<f64> = refs.iter().flat_map(|p| p.deltas[PROMPT_LEN..].to_vec()).collect();
    let rep = fidelity_report(&gen_tokens, &gen_dts, &ref_tokens, &ref_dts, &vocab)?;

    let unigram = fit_unigram(&vocab, &train)?;
    let bigram = fit_bigram(&vocab, &train)?;
    let model_ppl = teacher_forcing_perplexity(&frozen, &refs)?;
    let uni_ppl = teacher_forcing_perplexity(&unigram, &refs)?;
    println!(
        "{} C4: jaccard {:.4} collapse {:.4} model_ppl {:.2} uni_ppl {:.2}",
        el(&t0), rep.type_jaccard_pooled, rep.mode_collapse_rate, model_ppl, uni_ppl
    );

    let mut uni_pool = Vec::new();
    let mut bi_pool = Vec::new();
    for (i, p) in refs.iter().enumerate() {
        let prompt = PatientSequence {
            patient_id: p.patient_id,
            tokens: p.tokens[..PROMPT_LEN].to_vec(),
            deltas: p.deltas[..PROMPT_LEN].to_vec(),
        };
        let mut r1 = rng_at(1001, &[stream::BASELINE, 1, i as u64]);
        let mut r2 = rng_at(1001, &[stream::BASELINE, 2, i as u64]);
        uni_pool.push(unigram.sample(&prompt, 60, &mut r1)?.seq);
        bi_pool.push(bigram.sample(&prompt, 60, &mut r2)?.seq);
    }
    let uni_tokens: Vec<&[TokenId]> = uni_pool.iter().map(|g| &g.tokens[PROMPT_LEN..]).collect();
    let bi_tokens: Vec<&[TokenId]> = bi_pool.iter().map(|g| &g.tokens[PROMPT_LEN..]).collect();
    let uni_dts: Vec<f64> = uni_pool.iter().flat_map(|g| g.deltas[PROMPT_LEN..].to_vec()).collect();
    let bi_dts: Vec<f64> = bi_pool.iter().flat_map(|g| g.deltas[PROMPT_LEN..].to_vec()).collect();
    let rep_uni = fidelity_report(&uni_tokens, &uni_dts, &ref_tokens, &ref_dts, &vocab)?;
    let rep_bi = fidelity_report(&bi_tokens, &bi_dts, &ref_tokens, &ref_dts, &vocab)?;
    println!(
        "{} C5 JSD: model {:.4} uni {:.4} bi {:.4}; KS: model {:.4} uni {:.4} bi {:.4}",
        el(&t0), rep.transitions.jsd, rep_uni.transitions.jsd, rep_bi.transitions.jsd,
        rep.timing.ks.unwrap_or(f64::NAN), rep_uni.timing.ks.unwrap_or(f64::NAN),
        rep_bi.timing.ks.unwrap_or(f64::NAN)
    );

    // ---- criterion 11
    let mem_refs: Vec<PatientSequence> = train.iter().take(150).cloned().collect();
    let mem_gen = gen_pool(&frozen, &vocab, &mem_refs, 7007, 60)?;
    let mg: Vec<&[TokenId]> = mem_gen.iter().map(|g| g.tokens.as_slice()).collect();
    let mt: Vec<&[TokenId]> = train.iter().map(|p| p.tokens.as_slice()).collect();
    let mem = nn_memorisation(&mg, &mt, &mut rng_at(1001, &[stream::MEMCHECK]))?;
    println!(
        "{} C11: mean {:.4} max {:.4} random {:.4}",
        el(&t0), mem.mean_nn_jaccard, mem.max_nn_jaccard, mem.random_pair_baseline
    );

    // ---- criterion 12
    let cfg_b = site_b();
    let (cohort_b, _) = generate_cohort(&cfg_b)?;
    let splits_b = assign_splits(cohort_b.len(), 0.8, 0.0, cfg_b.seed);
    let b_train = by_split(&cohort_b, &splits_b, Split::Train);
    let b_test: Vec<PatientSequence> = by_split(&cohort_b, &splits_b, Split::Test)
        .into_iter()
        .filter(|p| p.len() > PROMPT_LEN + 1)
        .collect();
    let zero_ppl = teacher_forcing_perplexity(&frozen, &b_test)?;
    let zgen = gen_pool(&frozen, &vocab, &b_test, 8008, 40)?;
    let zpairs: Vec<(&[TokenId], &[TokenId])> = zgen
        .iter()
        .zip(&b_test)
        .map(|(g, r)| (&g.tokens[PROMPT_LEN..] as &[TokenId], &r.tokens[PROMPT_LEN..] as &[TokenId]))
        .collect();
    let zero_jac = type_jaccard_per_patient(&zpairs)?;

    let mut ft = TrainConfig::fine_tune(1);
    ft.total_steps = 600;
    ft.batch_size = 16;
    ft.scheduled_sampling = None;
    ft.val_every = 0;
    ft.checkpoint_every = 0;
    let mut ft_trainer = Trainer::new(trained, vocab.clone(), ft)?;
    ft_trainer.train(&b_train, &[], |_| Ok(()), |_| Ok(()))?;
    let (adapted, _) = ft_trainer.checkpoint().restore_model()?;
    let frozen_b = FrozenModel::from_model(&adapted)?;
    let ft_ppl = teacher_forcing_perplexity(&frozen_b, &b_test)?;
    let fgen = gen_pool(&frozen_b, &vocab, &b_test, 8008, 40)?;
    let fpairs: Vec<(&[TokenId], &[TokenId])> = fgen
        .iter()
        .zip(&b_test)
        .map(|(g, r)| (&g.tokens[PROMPT_LEN..] as &[TokenId], &r.tokens[PROMPT_LEN..] as &[TokenId]))
        .collect();
    let ft_jac = type_jaccard_per_patient(&fpairs)?;
    println!(
        "{} C12: zero-shot ppl {:.3} jac {:.4} -> fine-tuned ppl {:.3} jac {:.4}",
        el(&t0), zero_ppl, zero_jac, ft_ppl, ft_jac
    );

    println!("{} done", el(&t0));
    Ok(())
}
