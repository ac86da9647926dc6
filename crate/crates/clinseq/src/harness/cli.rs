//! The `clinseq` command-line interface.
//!
//! Nine subcommands cover the full experimental loop: `synth` a cohort,
//! `train` or `finetune` the decoder, `generate` trajectories,
//! `evaluate` fidelity, fit the n-gram `baseline`s, probe drug effects
//! with `tte`, dissociate state dependence with `ablate`, and audit
//! memorisation with `memcheck`. Every command takes a mandatory
//! `--seed` (no wall-clock default anywhere), writes all artifacts
//! under its `--out` directory, and records a [`RunManifest`] so the
//! run can be replayed bit for bit.
//!
//! Config files are JSON. Any top-level key can be overridden through
//! the environment as `CLINSEQ_<KEY>` (upper-cased key, value parsed as
//! JSON, falling back to a plain string). Exit codes: 0 success, 1 run
//! error, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_bigram, fit_unigram, BaselineSampler};
use crate::cohort::{assign_splits, PatientSequence, Split};
use crate::error::{Error, Result};
use crate::generator::{generate, GenerationConfig};
use crate::harness::io::{read_patients, write_patients, LoadedCohort};
use crate::harness::manifest::RunManifest;
use crate::metrics::{fidelity_report, nn_memorisation, render_table, FidelityReport};
use crate::model::{
    teacher_forcing_perplexity, Checkpoint, FrozenModel, Model, ModelConfig,
};
use crate::rng::{rng_at, stream};
use crate::stats::{
    ablation_run, incident_user_run, AblationResult, ComparisonRun, ComparisonSpec, Outcome,
};
use crate::synth::{generate_cohort, CohortConfig};
use crate::trainer::{ScheduledSamplingConfig, TrainConfig, Trainer};
use crate::vocab::{build_vocabulary, Vocabulary};

pub const ENV_PREFIX: &str = "CLINSEQ_";

pub const COHORT_FILE: &str = "cohort.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const GENERATED_FILE: &str = "generated.jsonl";
pub const FIDELITY_JSON: &str = "fidelity.json";
pub const FIDELITY_TABLE: &str = "fidelity.txt";
pub const BASELINE_JSON: &str = "baseline.json";
pub const BASELINE_TABLE: &str = "baseline.txt";
pub const TTE_JSON: &str = "tte.json";
pub const TTE_TABLE: &str = "tte.txt";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const MEMCHECK_JSON: &str = "memcheck.json";

// ---------------------------------------------------------------------------
// Argument grammar

#[derive(Parser, Debug)]
#[command(
    name = "clinseq",
    version,
    about = "Autoregressive clinical-event sequence modeling at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Output directory; every artifact of the run lands here.
    #[arg(long)]
    out: PathBuf,
    /// Master seed. Mandatory: nothing in this tool defaults to the
    /// wall clock.
    #[arg(long)]
    seed: u64,
    /// Bound on internal parallelism (rayon worker threads).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort with planted effects and its
    /// ground-truth ledger.
    Synth {
        /// Cohort config JSON (see synth::CohortConfig).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Pretrain the decoder on a cohort directory produced by synth.
    Train {
        /// Training config JSON; defaults cover the desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cohort directory (cohort.jsonl + vocab.json) or .jsonl file.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Adapt a pretrained checkpoint to a new site cohort.
    Finetune {
        /// Training config JSON; model-shape keys are ignored (the
        /// checkpoint defines the model).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Site cohort; tokens are encoded with the checkpoint's
        /// vocabulary.
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint JSON.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Sample trajectories from cohort-derived prompts.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Trajectory-fidelity report of the model against held-out
    /// patients, with n-gram perplexity reference points.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fit the unigram/bigram baselines and score them on held-out
    /// patients.
    Baseline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Forced-intervention drug-effect probes: incident-user anchoring,
    /// within-patient difference-in-differences.
    Tte {
        /// Comparison spec JSON listing the drug/outcome probes.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Prompt-shuffle ablation of the tte probes: state-dependent
    /// effects should collapse, state-independent ones survive.
    Ablate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Nearest-neighbour memorisation audit of generated trajectories.
    Memcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Synth { common, .. }
            | Command::Train { common, .. }
            | Command::Finetune { common, .. }
            | Command::Generate { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Baseline { common, .. }
            | Command::Tte { common, .. }
            | Command::Ablate { common, .. }
            | Command::Memcheck { common, .. } => common,
        }
    }
}

/// Parses and runs a full command line (including argv[0]); returns the
/// process exit code. Library callers and tests use this directly; the
/// binary just forwards `std::env::args`.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    let workers = cli.command.common().workers;
    let outcome = match workers {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))
            .and_then(|pool| pool.install(|| dispatch(&cli.command))),
        _ => dispatch(&cli.command),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth { config, common } => cmd_synth(config, common),
        Command::Train {
            config,
            data,
            common,
        } => cmd_train(config.as_deref(), data, common),
        Command::Finetune {
            config,
            data,
            model,
            common,
        } => cmd_finetune(config.as_deref(), data, model, common),
        Command::Generate {
            config,
            data,
            model,
            common,
        } => cmd_generate(config.as_deref(), data, model, common),
        Command::Evaluate {
            config,
            data,
            model,
            common,
        } => cmd_evaluate(config.as_deref(), data, model, common),
        Command::Baseline {
            config,
            data,
            common,
        } => cmd_baseline(config.as_deref(), data, common),
        Command::Tte {
            spec,
            data,
            model,
            common,
        } => cmd_tte(spec, data, model, common),
        Command::Ablate {
            spec,
            data,
            model,
            common,
        } => cmd_ablate(spec, data, model, common),
        Command::Memcheck {
            config,
            data,
            model,
            common,
        } => cmd_memcheck(config.as_deref(), data, model, common),
    }
}

// ---------------------------------------------------------------------------
// Config loading

fn apply_env_overrides(value: &mut serde_json::Value) {
    let Some(obj) = value.as_object_mut() else {
        return;
    };
    for (key, val) in std::env::vars() {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let parsed =
            serde_json::from_str(&val).unwrap_or(serde_json::Value::String(val));
        obj.insert(rest.to_ascii_lowercase(), parsed);
    }
}

/// Loads a JSON config, applies `CLINSEQ_*` env overrides, and records
/// the digest of what the run actually consumed.
fn load_config<T: DeserializeOwned>(path: &Path, manifest: &mut RunManifest) -> Result<T> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&raw)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    apply_env_overrides(&mut value);
    manifest.set_config(&serde_json::to_vec(&value)?);
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Default-config path: still subject to env overrides, digest recorded.
fn default_config<T: DeserializeOwned>(manifest: &mut RunManifest) -> Result<T> {
    let mut value = serde_json::Value::Object(Default::default());
    apply_env_overrides(&mut value);
    manifest.set_config(&serde_json::to_vec(&value)?);
    Ok(serde_json::from_value(value)?)
}

fn load_config_or_default<T: DeserializeOwned>(
    path: Option<&Path>,
    manifest: &mut RunManifest,
) -> Result<T> {
    match path {
        Some(p) => load_config(p, manifest),
        None => default_config(manifest),
    }
}

// ---------------------------------------------------------------------------
// Data-layout helpers

fn cohort_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(COHORT_FILE)
    } else {
        data.to_path_buf()
    }
}

fn vocab_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(VOCAB_FILE)
    } else {
        data.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE)
    }
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&raw)?)
}

fn load_checkpoint(path: &Path) -> Result<(FrozenModel, Vocabulary)> {
    let ckpt = Checkpoint::load(path)?;
    let (model, vocab) = ckpt.restore_model()?;
    Ok((FrozenModel::from_model(&model)?, vocab))
}

/// The requested split when the cohort carries labels, the whole cohort
/// otherwise.
fn pool_or_all(loaded: &LoadedCohort, want: Split) -> Vec<PatientSequence> {
    if loaded.splits.iter().any(|s| s.is_some()) {
        loaded.split(want)
    } else {
        loaded.patients.clone()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    fs::write(path, json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Serialize, Deserialize)]
struct SynthFileConfig {
    #[serde(flatten)]
    cohort: CohortConfig,
    #[serde(default = "default_train_frac")]
    train_frac: f64,
    #[serde(default = "default_val_frac")]
    val_frac: f64,
}

fn default_train_frac() -> f64 {
    0.8
}

fn default_val_frac() -> f64 {
    0.1
}

fn cmd_synth(config: &Path, common: &CommonArgs) -> Result<()> {
    let mut manifest = RunManifest::start("synth", common.seed);
    fs::create_dir_all(&common.out)?;
    let mut cfg: SynthFileConfig = load_config(config, &mut manifest)?;
    manifest.add_input(config)?;
    cfg.cohort.seed = common.seed;
    if !(cfg.train_frac >= 0.0
        && cfg.val_frac >= 0.0
        && cfg.train_frac + cfg.val_frac <= 1.0)
    {
        return Err(Error::Config(format!(
            "split fractions {}/{} do not fit in [0,1]",
            cfg.train_frac, cfg.val_frac
        )));
    }
    let (patients, ledger) = generate_cohort(&cfg.cohort)?;
    let vocab = build_vocabulary(&cfg.cohort.vocab_recipe())?;
    let splits = assign_splits(patients.len(), cfg.train_frac, cfg.val_frac, common.seed);
    write_patients(&common.out.join(COHORT_FILE), &patients, &vocab, &splits)?;
    write_json(&common.out.join(VOCAB_FILE), &vocab)?;
    write_json(&common.out.join(LEDGER_FILE), &ledger)?;
    let n_train = splits.iter().filter(|s| **s == Split::Train).count();
    println!(
        "synth: {} patients ({} train), vocabulary of {} tokens, {} planted effects",
        patients.len(),
        n_train,
        vocab.len(),
        ledger.effects.len()
    );
    manifest.finish(&common.out)
}

// ---------------------------------------------------------------------------
// train / finetune

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainFileConfig {
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    d_ff: usize,
    max_seq_len: usize,
    total_steps: u64,
    batch_size: usize,
    peak_lr: f64,
    warmup_steps: u64,
    weight_decay: f64,
    clip_norm: f64,
    scheduled_sampling: bool,
    ss_fraction: f64,
    ss_start_min: usize,
    ss_start_max: usize,
    ss_temperature: f64,
    ss_top_k: usize,
    val_every: u64,
    val_max_sequences: usize,
    checkpoint_every: u64,
    n_buckets: usize,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        let m = ModelConfig::desk();
        let t = TrainConfig::pretrain(2_000, 0);
        let ss = ScheduledSamplingConfig::default();
        TrainFileConfig {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_seq_len: m.max_seq_len,
            total_steps: t.total_steps,
            batch_size: t.batch_size,
            peak_lr: t.peak_lr,
            warmup_steps: 200,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
            scheduled_sampling: true,
            ss_fraction: ss.fraction,
            ss_start_min: ss.start_min,
            ss_start_max: ss.start_max,
            ss_temperature: ss.temperature,
            ss_top_k: ss.top_k,
            val_every: t.val_every,
            val_max_sequences: t.val_max_sequences,
            checkpoint_every: t.checkpoint_every,
            n_buckets: t.n_buckets,
        }
    }
}

impl TrainFileConfig {
    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            scheduled_sampling: self.scheduled_sampling.then(|| ScheduledSamplingConfig {
                fraction: self.ss_fraction,
                start_min: self.ss_start_min,
                start_max: self.ss_start_max,
                temperature: self.ss_temperature,
                top_k: self.ss_top_k,
            }),
            val_every: self.val_every,
            val_max_sequences: self.val_max_sequences,
            checkpoint_every: self.checkpoint_every,
            n_buckets: self.n_buckets,
            seed,
        }
    }
}

fn run_training(
    trainer: &mut Trainer,
    train_pool: &[PatientSequence],
    val_pool: &[PatientSequence],
    common: &CommonArgs,
) -> Result<()> {
    use std::io::Write as _;
    let log_file = fs::File::create(common.out.join(TRAIN_LOG_FILE))?;
    let mut log = std::io::BufWriter::new(log_file);
    let ckpt_path = common.out.join(CHECKPOINT_FILE);
    let report = trainer.train(
        train_pool,
        val_pool,
        |row| {
            serde_json::to_writer(&mut log, row)?;
            log.write_all(b"\n")?;
            Ok(())
        },
        |ckpt| ckpt.save(&ckpt_path),
    )?;
    log.flush()?;
    trainer.checkpoint().save(&ckpt_path)?;
    write_json(&common.out.join(TRAIN_REPORT_FILE), &report)?;
    println!(
        "trained {} steps (skipped {}), terminal samples in rollouts: {}, final loss {:.4}, val ppl {}",
        report.steps_run,
        report.skipped_steps,
        report.terminal_samples,
        report.final_loss.unwrap_or(f64::NAN),
        report
            .final_val_ppl
            .map(|p| format!("{p:.2}"))
            .unwrap_or_else(|| "n/a".into()),
    );
    Ok(())
}

fn cmd_train(config: Option<&Path>, data: &Path, common: &CommonArgs) -> Result<()> {
    let mut manifest = RunManifest::start("train", common.seed);
    fs::create_dir_all(&common.out)?;
    let cfg: TrainFileConfig = load_config_or_default(config, &mut manifest)?;
    if let Some(p) = config {
        manifest.add_input(p)?;
    }
    let cohort = cohort_path(data);
    let vocab_file = vocab_path(data);
    manifest.add_input(&cohort)?;
    manifest.add_input(&vocab_file)?;
    let vocab = load_vocab(&vocab_file)?;
    let loaded = read_patients(&cohort, &vocab)?;
    let train_pool = pool_or_all(&loaded, Split::Train);
    let val_pool = pool_or_all(&loaded, Split::Val);
    let mut train_cfg = cfg.train_config(common.seed);
    if val_pool.is_empty() {
        train_cfg.val_every = 0;
    }
    let model = Model::new(
        cfg.model_config(),
        &vocab,
        &mut rng_at(common.seed, &[stream::INIT]),
    )?;
    let mut trainer = Trainer::new(model, vocab, train_cfg)?;
    run_training(&mut trainer, &train_pool, &val_pool, common)?;
    manifest.finish(&common.out)
}

fn cmd_finetune(
    config: Option<&Path>,
    data: &Path,
    model_path: &Path,
    common: &CommonArgs,
) -> Result<()> {
    let mut manifest = RunManifest::start("finetune", common.seed);
    fs::create_dir_all(&common.out)?;
    let mut cfg: TrainFileConfig = match config {
        Some(p) => load_config(p, &mut manifest)?,
        None => {
            // Site-adaptation preset: shorter and gentler than pretraining.
            let base = TrainConfig::fine_tune(0);
            let mut c = TrainFileConfig::default();
            c.total_steps = base.total_steps;
            c.peak_lr = base.peak_lr;
            c.warmup_steps = base.warmup_steps;
            let mut value = serde_json::to_value(&c)?;
            apply_env_overrides(&mut value);
            manifest.set_config(&serde_json::to_vec(&value)?);
            serde_json::from_value(value)?
        }
    };
    if let Some(p) = config {
        manifest.add_input(p)?;
    }
    let cohort = cohort_path(data);
    manifest.add_input(&cohort)?;
    manifest.add_input(model_path)?;
    let ckpt = Checkpoint::load(model_path)?;
    let (model, vocab) = ckpt.restore_model()?;
    // The checkpoint fixes the model; ignore any shape keys in the config.
    cfg.d_model = model.cfg.d_model;
    cfg.n_layers = model.cfg.n_layers;
    cfg.n_heads = model.cfg.n_heads;
    cfg.d_ff = model.cfg.d_ff;
    cfg.max_seq_len = model.cfg.max_seq_len;
    let loaded = read_patients(&cohort, &vocab)?;
    let train_pool = pool_or_all(&loaded, Split::Train);
    let val_pool = pool_or_all(&loaded, Split::Val);
    let mut train_cfg = cfg.train_config(common.seed);
    if val_pool.is_empty() {
        train_cfg.val_every = 0;
    }
    let mut trainer = Trainer::new(model, vocab, train_cfg)?;
    run_training(&mut trainer, &train_pool, &val_pool, common)?;
    manifest.finish(&common.out)
}

// ---------------------------------------------------------------------------
// generate / evaluate

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GenerateFileConfig {
    temperature: f64,
    /// 0 keeps the whole distribution.
    top_k: usize,
    max_new_tokens: usize,
    /// Class prefixes (e.g. "MED:C0") whose tokens may never be sampled.
    suppress: Vec<String>,
    /// Prompt length in tokens; 4 is [BOS] plus the demographic block.
    prompt_len: usize,
    /// Cap on prompts taken from the cohort; 0 means all.
    n_patients: usize,
    /// Which split provides prompts (and, for evaluate, references).
    split: Split,
}

impl Default for GenerateFileConfig {
    fn default() -> Self {
        GenerateFileConfig {
            temperature: 1.0,
            top_k: 20,
            max_new_tokens: 120,
            suppress: vec![],
            prompt_len: 4,
            n_patients: 0,
            split: Split::Test,
        }
    }
}

impl GenerateFileConfig {
    fn generation_config(&self, vocab: &Vocabulary) -> Result<GenerationConfig> {
        Ok(GenerationConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            max_new_tokens: self.max_new_tokens,
            suppress: vocab.suppression_set(&self.suppress)?,
            ..GenerationConfig::default()
        })
    }
}

fn cap_pool(mut pool: Vec<PatientSequence>, cap: usize) -> Vec<PatientSequence> {
    if cap > 0 {
        pool.truncate(cap);
    }
    pool
}

fn take_prompts(
    pool: &[PatientSequence],
    prompt_len: usize,
    cap: usize,
) -> Vec<PatientSequence> {
    let n = if cap == 0 { pool.len() } else { cap.min(pool.len()) };
    pool[..n]
        .iter()
        .map(|p| {
            let k = prompt_len.clamp(1, p.len());
            PatientSequence {
                patient_id: p.patient_id,
                tokens: p.tokens[..k].to_vec(),
                deltas: p.deltas[..k].to_vec(),
            }
        })
        .collect()
}

fn generate_pool(
    frozen: &FrozenModel,
    vocab: &Vocabulary,
    prompts: &[PatientSequence],
    gen_cfg: &GenerationConfig,
    seed: u64,
    seed_stream: u64,
) -> Result<Vec<PatientSequence>> {
    prompts
        .par_iter()
        .map(|prompt| {
            let mut rng = rng_at(seed, &[seed_stream, prompt.patient_id]);
            let traj = generate(frozen, vocab, prompt, None, gen_cfg, &mut rng)?;
            Ok(traj.seq)
        })
        .collect()
}

fn cmd_generate(
    config: Option<&Path>,
    data: &Path,
    model_path: &Path,
    common: &CommonArgs,
) -> Result<()> {
    let mut manifest = RunManifest::start("generate", common.seed);
    fs::create_dir_all(&common.out)?;
    let cfg: GenerateFileConfig = load_config_or_default(config, &mut manifest)?;
    if let Some(p) = config {
        manifest.add_input(p)?;
    }
    let cohort = cohort_path(data);
    manifest.add_input(&cohort)?;
    manifest.add_input(model_path)?;
    let (frozen, vocab) = load_checkpoint(model_path)?;
    let loaded = read_patients(&cohort, &vocab)?;
    let pool = pool_or_all(&loaded, cfg.split);
    let prompts = take_prompts(&pool, cfg.prompt_len, cfg.n_patients);
    if prompts.is_empty() {
        return Err(Error::Generation("no prompts in the selected split".into()));
    }
    let gen_cfg = cfg.generation_config(&vocab)?;
    let generated = generate_pool(
        &frozen,
        &vocab,
        &prompts,
        &gen_cfg,
        common.seed,
        stream::GENERATE,
    )?;
    write_patients(&common.out.join(GENERATED_FILE), &generated, &vocab, &[])?;
    let mean_len =
        generated.iter().map(|g| g.len()).sum::<usize>() as f64 / generated.len() as f64;
    println!(
        "generated {} trajectories, mean length {:.1} tokens",
        generated.len(),
        mean_len
    );
    manifest.finish(&common.out)
}

fn cmd_evaluate(
    config: Option<&Path>,
    data: &Path,
    model_path: &Path,
    common: &CommonArgs,
) -> Result<()> {
    let mut manifest = RunManifest::start("evaluate", common.seed);
    fs::create_dir_all(&common.out)?;
    let cfg: GenerateFileConfig = load_config_or_default(config, &mut manifest)?;
    if let Some(p) = config {
        manifest.add_input(p)?;
    }
    let cohort = cohort_path(data);
    manifest.add_input(&cohort)?;
    manifest.add_input(model_path)?;
    let (frozen, vocab) = load_checkpoint(model_path)?;
    let loaded = read_patients(&cohort, &vocab)?;
    let refs_all = pool_or_all(&loaded, cfg.split);
    // Only patients with events beyond the prompt can anchor a comparison.
    let refs: Vec<PatientSequence> = refs_all
        .into_iter()
        .filter(|p| p.len() > cfg.prompt_len + 1)
        .collect();
    if refs.is_empty() {
        return Err(Error::Generation(
            "no reference patients longer than the prompt".into(),
        ));
    }
    let refs = cap_pool(refs, cfg.n_patients);
    let prompts = take_prompts(&refs, cfg.prompt_len, 0);
    let gen_cfg = cfg.generation_config(&vocab)?;
    let generated = generate_pool(
        &frozen,
        &vocab,
        &prompts,
        &gen_cfg,
        common.seed,
        stream::EVAL,
    )?;

    let gen_tokens: Vec<&[crate::vocab::TokenId]> = generated
        .iter()
        .map(|g| &g.tokens[cfg.prompt_len.min(g.len())..])
        .collect();
    let ref_tokens: Vec<&[crate::vocab::TokenId]> = refs
        .iter()
        .map(|r| &r.tokens[cfg.prompt_len.min(r.len())..])
        .collect();
    let gen_dts: Vec<f64> = generated
        .iter()
        .flat_map(|g| g.deltas[cfg.prompt_len.min(g.len())..].to_vec())
        .collect();
    let ref_dts: Vec<f64> = refs
        .iter()
        .flat_map(|r| r.deltas[cfg.prompt_len.min(r.len())..].to_vec())
        .collect();
    let mut report = fidelity_report(&gen_tokens, &gen_dts, &ref_tokens, &ref_dts, &vocab)?;

    report.model_ppl = Some(teacher_forcing_perplexity(&frozen, &refs)?);
    let train_pool = pool_or_all(&loaded, Split::Train);
    if !train_pool.is_empty() {
        let unigram = fit_unigram(&vocab, &train_pool)?;
        let bigram = fit_bigram(&vocab, &train_pool)?;
        report.unigram_ppl = Some(teacher_forcing_perplexity(&unigram, &refs)?);
        report.bigram_ppl = Some(teacher_forcing_perplexity(&bigram, &refs)?);
    }

    write_json(&common.out.join(FIDELITY_JSON), &report)?;
    let table = render_table(&report);
    fs::write(common.out.join(FIDELITY_TABLE), &table)?;
    print!("{table}");
    manifest.finish(&common.out)
}

// ---------------------------------------------------------------------------
// baseline

#[derive(Debug, Serialize)]
struct BaselineReport {
    unigram: FidelityReport,
    bigram: FidelityReport,
}

fn cmd_baseline(config: Option<&Path>, data: &Path, common: &CommonArgs) -> Result<()> {
    let mut manifest = RunManifest::start("baseline", common.seed);
    fs::create_dir_all(&common.out)?;
    let cfg: GenerateFileConfig = load_config_or_default(config, &mut manifest)?;
    if let Some(p) = config {
        manifest.add_input(p)?;
    }
    let cohort = cohort_path(data);
    let vocab_file = vocab_path(data);
    manifest.add_input(&cohort)?;
    manifest.add_input(&vocab_file)?;
    let vocab = load_vocab(&vocab_file)?;
    let loaded = read_patients(&cohort, &vocab)?;
    let train_pool = pool_or_all(&loaded, Split::Train);
    let refs_all = pool_or_all(&loaded, cfg.split);
    let refs: Vec<PatientSequence> = refs_all
        .into_iter()
        .filter(|p| p.len() > cfg.prompt_len + 1)
        .collect();
    if refs.is_empty() {
        return Err(Error::Generation(
            "no reference patients longer than the prompt".into(),
        ));
    }
    let refs = cap_pool(refs, cfg.n_patients);
    let prompts = take_prompts(&refs, cfg.prompt_len, 0);

    let unigram = fit_unigram(&vocab, &train_pool)?;
    let bigram = fit_bigram(&vocab, &train_pool)?;
    let unigram_ppl = teacher_forcing_perplexity(&unigram, &refs)?;
    let bigram_ppl = teacher_forcing_perplexity(&bigram, &refs)?;

    let sample_pool = |sampler: &dyn BaselineSampler, tag: u64| -> Result<Vec<PatientSequence>> {
        prompts
            .iter()
            .map(|prompt| {
                let mut rng = rng_at(common.seed, &[stream::BASELINE, tag, prompt.patient_id]);
                Ok(sampler
                    .sample(prompt, cfg.max_new_tokens, &mut rng)?
                    .seq)
            })
            .collect()
    };
    let uni_pool = sample_pool(&unigram, 1)?;
    let bi_pool = sample_pool(&bigram, 2)?;

    let score = |pool: &[PatientSequence]| -> Result<FidelityReport> {
        let gen_tokens: Vec<&[crate::vocab::TokenId]> = pool
            .iter()
            .map(|g| &g.tokens[cfg.prompt_len.min(g.len())..])
            .collect();
        let ref_tokens: Vec<&[crate::vocab::TokenId]> = refs
            .iter()
            .map(|r| &r.tokens[cfg.prompt_len.min(r.len())..])
            .collect();
        let gen_dts: Vec<f64> = pool
            .iter()
            .flat_map(|g| g.deltas[cfg.prompt_len.min(g.len())..].to_vec())
            .collect();
        let ref_dts: Vec<f64> = refs
            .iter()
            .flat_map(|r| r.deltas[cfg.prompt_len.min(r.len())..].to_vec())
            .collect();
        let mut r = fidelity_report(&gen_tokens, &gen_dts, &ref_tokens, &ref_dts, &vocab)?;
        r.unigram_ppl = Some(unigram_ppl);
        r.bigram_ppl = Some(bigram_ppl);
        Ok(r)
    };
    let report = BaselineReport {
        unigram: score(&uni_pool)?,
        bigram: score(&bi_pool)?,
    };
    write_json(&common.out.join(BASELINE_JSON), &report)?;
    let table = format!(
        "== unigram ==\n{}\n== bigram ==\n{}",
        render_table(&report.unigram),
        render_table(&report.bigram)
    );
    fs::write(common.out.join(BASELINE_TABLE), &table)?;
    print!("{table}");
    manifest.finish(&common.out)
}

// ---------------------------------------------------------------------------
// tte / ablate

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TteSpecEntry {
    #[serde(default)]
    name: Option<String>,
    /// Treatment drug token, e.g. "MED:C0".
    treat: String,
    /// Active-comparator token of a different class.
    control: String,
    /// "MORTALITY" or a measure key like "LAB:M1".
    outcome: Outcome,
    window_days: f64,
    n_patients: usize,
    n_per_arm: usize,
    #[serde(default = "default_baseline_k")]
    baseline_k: usize,
    #[serde(default)]
    expected_direction: Option<i8>,
}

fn default_baseline_k() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TteGeneration {
    temperature: f64,
    top_k: usize,
    max_new_tokens: usize,
    suppress: Vec<String>,
}

impl Default for TteGeneration {
    fn default() -> Self {
        TteGeneration {
            temperature: 1.0,
            top_k: 20,
            max_new_tokens: 60,
            suppress: vec![],
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TteSpecFile {
    comparisons: Vec<TteSpecEntry>,
    #[serde(default)]
    generation: TteGeneration,
}

impl TteSpecEntry {
    fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!("{} vs {} -> {}", self.treat, self.control, self.outcome)
        })
    }

    fn resolve(&self, vocab: &Vocabulary) -> Result<ComparisonSpec> {
        let tok = |s: &str| {
            vocab
                .id(s)
                .ok_or_else(|| Error::Vocab(format!("token {s} missing from vocabulary")))
        };
        let spec = ComparisonSpec {
            treat_token: tok(&self.treat)?,
            control_token: tok(&self.control)?,
            outcome: self.outcome.clone(),
            window_days: self.window_days,
            n_patients: self.n_patients,
            n_per_arm: self.n_per_arm,
            baseline_k: self.baseline_k,
            expected_direction: self.expected_direction,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl TteGeneration {
    fn generation_config(&self, vocab: &Vocabulary) -> Result<GenerationConfig> {
        Ok(GenerationConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            max_new_tokens: self.max_new_tokens,
            suppress: vocab.suppression_set(&self.suppress)?,
            ..GenerationConfig::default()
        })
    }
}

#[derive(Debug, Serialize)]
struct TteRow {
    name: String,
    treat: String,
    control: String,
    outcome: Outcome,
    run: ComparisonRun,
}

fn load_tte_inputs(
    spec_path: &Path,
    data: &Path,
    model_path: &Path,
    manifest: &mut RunManifest,
) -> Result<(TteSpecFile, FrozenModel, Vocabulary, Vec<PatientSequence>)> {
    let spec: TteSpecFile = load_config(spec_path, manifest)?;
    manifest.add_input(spec_path)?;
    let cohort = cohort_path(data);
    manifest.add_input(&cohort)?;
    manifest.add_input(model_path)?;
    if spec.comparisons.is_empty() {
        return Err(Error::Config("spec lists no comparisons".into()));
    }
    let (frozen, vocab) = load_checkpoint(model_path)?;
    let loaded = read_patients(&cohort, &vocab)?;
    Ok((spec, frozen, vocab, loaded.patients))
}

fn fmt_p(p: f64) -> String {
    if p < 1e-4 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

fn cmd_tte(spec_path: &Path, data: &Path, model_path: &Path, common: &CommonArgs) -> Result<()> {
    let mut manifest = RunManifest::start("tte", common.seed);
    fs::create_dir_all(&common.out)?;
    let (spec, frozen, vocab, patients) =
        load_tte_inputs(spec_path, data, model_path, &mut manifest)?;
    let gen_cfg = spec.generation.generation_config(&vocab)?;

    let mut rows = Vec::new();
    let mut table = String::from(
        "association                              n      DiD     95% CI               p        dir  verdict\n",
    );
    for entry in &spec.comparisons {
        let cspec = entry.resolve(&vocab)?;
        let run = incident_user_run(&frozen, &vocab, &patients, &cspec, &gen_cfg, common.seed)?;
        let r = &run.result;
        table.push_str(&format!(
            "{:<40} {:<6} {:>+7.3} [{:>+7.3}, {:>+7.3}] {:<8} {:<4} {}\n",
            entry.display_name(),
            r.n_effective,
            r.mean_did,
            r.ci95.0,
            r.ci95.1,
            fmt_p(r.wilcoxon_p),
            match r.direction {
                1 => "+",
                -1 => "-",
                _ => "0",
            },
            match r.verdict {
                Some(true) => "expected",
                Some(false) => "OPPOSITE",
                None => "n/a",
            }
        ));
        rows.push(TteRow {
            name: entry.display_name(),
            treat: entry.treat.clone(),
            control: entry.control.clone(),
            outcome: entry.outcome.clone(),
            run,
        });
    }
    write_json(&common.out.join(TTE_JSON), &rows)?;
    fs::write(common.out.join(TTE_TABLE), &table)?;
    print!("{table}");
    manifest.finish(&common.out)
}

#[derive(Debug, Serialize)]
struct AblationRow {
    name: String,
    ordered_did: f64,
    shuffled_did: f64,
    /// |ordered| / |shuffled|; absent when the shuffled DiD is zero.
    ratio: Option<f64>,
    shuffled_null: bool,
    n_unshuffled: usize,
    detail: AblationResult,
}

fn cmd_ablate(
    spec_path: &Path,
    data: &Path,
    model_path: &Path,
    common: &CommonArgs,
) -> Result<()> {
    let mut manifest = RunManifest::start("ablate", common.seed);
    fs::create_dir_all(&common.out)?;
    let (spec, frozen, vocab, patients) =
        load_tte_inputs(spec_path, data, model_path, &mut manifest)?;
    let gen_cfg = spec.generation.generation_config(&vocab)?;

    let mut rows = Vec::new();
    let mut table = String::from(
        "association                              ordered  shuffled  ratio\n",
    );
    for entry in &spec.comparisons {
        let cspec = entry.resolve(&vocab)?;
        let result = ablation_run(&frozen, &vocab, &patients, &cspec, &gen_cfg, common.seed)?;
        let ratio = result.ratio.is_finite().then_some(result.ratio);
        table.push_str(&format!(
            "{:<40} {:>+8.3} {:>+9.3} {:>6}\n",
            entry.display_name(),
            result.ordered.result.mean_did,
            result.shuffled.result.mean_did,
            ratio
                .map(|r| format!("{r:.2}"))
                .unwrap_or_else(|| "inf".into()),
        ));
        rows.push(AblationRow {
            name: entry.display_name(),
            ordered_did: result.ordered.result.mean_did,
            shuffled_did: result.shuffled.result.mean_did,
            ratio,
            shuffled_null: result.shuffled_null,
            n_unshuffled: result.n_unshuffled,
            detail: result,
        });
    }
    write_json(&common.out.join(ABLATION_JSON), &rows)?;
    fs::write(common.out.join(ABLATION_TABLE), &table)?;
    print!("{table}");
    manifest.finish(&common.out)
}

// ---------------------------------------------------------------------------
// memcheck

#[derive(Debug, Serialize)]
struct MemcheckArtifact {
    report: crate::metrics::MemorisationReport,
    /// True when some generated trajectory's token set is a verbatim
    /// subset match of a training sequence (Jaccard exactly 1).
    verbatim_overlap: bool,
}

fn cmd_memcheck(
    config: Option<&Path>,
    data: &Path,
    model_path: &Path,
    common: &CommonArgs,
) -> Result<()> {
    let mut manifest = RunManifest::start("memcheck", common.seed);
    fs::create_dir_all(&common.out)?;
    let mut cfg: GenerateFileConfig = load_config_or_default(config, &mut manifest)?;
    if let Some(p) = config {
        manifest.add_input(p)?;
    }
    if config.is_none() {
        // Memorisation is a property of the training pool.
        cfg.split = Split::Train;
        cfg.n_patients = 200;
    }
    let cohort = cohort_path(data);
    manifest.add_input(&cohort)?;
    manifest.add_input(model_path)?;
    let (frozen, vocab) = load_checkpoint(model_path)?;
    let loaded = read_patients(&cohort, &vocab)?;
    let train_pool = pool_or_all(&loaded, Split::Train);
    let prompt_pool = pool_or_all(&loaded, cfg.split);
    let prompts = take_prompts(&prompt_pool, cfg.prompt_len, cfg.n_patients);
    if prompts.is_empty() || train_pool.is_empty() {
        return Err(Error::Stats("memcheck needs prompts and a training pool".into()));
    }
    let gen_cfg = cfg.generation_config(&vocab)?;
    let generated = generate_pool(
        &frozen,
        &vocab,
        &prompts,
        &gen_cfg,
        common.seed,
        stream::MEMCHECK,
    )?;
    let gen_refs: Vec<&[crate::vocab::TokenId]> =
        generated.iter().map(|g| g.tokens.as_slice()).collect();
    let train_refs: Vec<&[crate::vocab::TokenId]> =
        train_pool.iter().map(|t| t.tokens.as_slice()).collect();
    let report = nn_memorisation(
        &gen_refs,
        &train_refs,
        &mut rng_at(common.seed, &[stream::MEMCHECK]),
    )?;
    let artifact = MemcheckArtifact {
        verbatim_overlap: report.max_nn_jaccard >= 1.0,
        report,
    };
    write_json(&common.out.join(MEMCHECK_JSON), &artifact)?;
    println!(
        "memcheck: max NN Jaccard {:.3}, mean {:.3}, random-pair baseline {:.3}{}",
        artifact.report.max_nn_jaccard,
        artifact.report.mean_nn_jaccard,
        artifact.report.random_pair_baseline,
        if artifact.verbatim_overlap {
            " [VERBATIM OVERLAP]"
        } else {
            ""
        }
    );
    manifest.finish(&common.out)
}
