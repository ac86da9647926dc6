//! The autoregressive event-sequence model.
//!
//! A pre-norm transformer decoder over composite clinical tokens with
//! ALiBi positional biases (no learned positions), a factored embedding
//! for ordinal LAB/VITAL tokens, a time-gap encoder on the input side,
//! and two heads on the output side: next-token logits tied to the
//! composed embedding matrix, and a zero-inflated log-normal head for the
//! gap to the next event.
//!
//! Position `i` predicts both `token[i+1]` and `delta[i+1]`.

pub mod checkpoint;
pub mod frozen;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::PatientSequence;
use crate::error::{Error, Result};
use crate::numerics::{EmdGroup, RowSource, Tensor};
use crate::vocab::{TokenFamily, Vocabulary};

pub use checkpoint::Checkpoint;
pub use frozen::{teacher_forcing_perplexity, DecodeState, FrozenModel, NextTokenScorer};

/// Loss mix weights: `L = ce + ZILN_WEIGHT * ziln + EMD_WEIGHT * emd`.
pub const ZILN_WEIGHT: f64 = 0.5;
pub const EMD_WEIGHT: f64 = 0.25;

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Small configuration that trains in minutes on a laptop CPU.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
        }
    }

    /// Reference configuration; kept for parameter accounting, not for
    /// CPU training.
    pub fn scaled() -> Self {
        ModelConfig {
            d_model: 384,
            n_layers: 8,
            n_heads: 12,
            d_ff: 1536,
            max_seq_len: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }
}

/// ALiBi slopes: head `h` (1-based) gets `2^(-8h / n_heads)`.
pub fn alibi_slopes(n_heads: usize) -> Vec<f64> {
    (1..=n_heads)
        .map(|h| 2f64.powf(-8.0 * h as f64 / n_heads as f64))
        .collect()
}

/// Loss weight by target-token family.
pub fn family_weight(family: TokenFamily) -> f64 {
    match family {
        TokenFamily::Lab | TokenFamily::Vital | TokenFamily::Smoke => 2.0,
        TokenFamily::Dx => 3.0,
        TokenFamily::Age => 0.25,
        TokenFamily::Med | TokenFamily::Sex | TokenFamily::Special => 1.0,
    }
}

#[derive(Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2: LayerNormParams,
    pub ff: Mlp,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub embed_token: Tensor,
    pub embed_measure: Tensor,
    pub embed_ordinal: Tensor,
    pub time_mlp: Mlp,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNormParams,
    pub time_head: Mlp,
    slopes: Vec<f64>,
    layout: Vec<RowSource>,
    vocab_len: usize,
    n_measures: usize,
}

pub struct ForwardOutput {
    /// Final hidden states, `(bsz * seq_len) x d_model`.
    pub hidden: Tensor,
    /// Next-token logits, `(bsz * seq_len) x V`, tied to the embedding.
    pub logits: Tensor,
    /// ZILN parameters `(logit_z, mu, log_sigma)` per position.
    pub time_params: Tensor,
}

pub struct LossOutput {
    pub total: Tensor,
    pub ce: f64,
    pub ziln: f64,
    pub emd: f64,
}

impl Model {
    /// Random initialization: weights N(0, 0.02), biases zero, layer norm
    /// gains one.
    pub fn new<R: Rng>(cfg: ModelConfig, vocab: &Vocabulary, rng: &mut R) -> Result<Self> {
        Self::build(cfg, vocab, |rows, cols, kind| match kind {
            ParamKind::Weight => Tensor::randn_param(rows, cols, INIT_STD, rng),
            ParamKind::Bias => Tensor::zeros_param(rows, cols),
            ParamKind::Gain => Tensor::param(rows, cols, vec![1.0; rows * cols])
                .expect("gain shape is consistent"),
        })
    }

    /// All-zero weights (layer norm gains stay one). With tied output
    /// weights this produces exactly uniform next-token logits, which
    /// pins the untrained perplexity to the vocabulary size.
    pub fn zero_init(cfg: ModelConfig, vocab: &Vocabulary) -> Result<Self> {
        Self::build(cfg, vocab, |rows, cols, kind| match kind {
            ParamKind::Weight | ParamKind::Bias => Tensor::zeros_param(rows, cols),
            ParamKind::Gain => Tensor::param(rows, cols, vec![1.0; rows * cols])
                .expect("gain shape is consistent"),
        })
    }

    fn build(
        cfg: ModelConfig,
        vocab: &Vocabulary,
        mut make: impl FnMut(usize, usize, ParamKind) -> Tensor,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let v = vocab.len();
        let m = vocab.n_measures().max(1);
        let mlp = |make: &mut dyn FnMut(usize, usize, ParamKind) -> Tensor,
                   d_in: usize,
                   d_hidden: usize,
                   d_out: usize| Mlp {
            w1: make(d_in, d_hidden, ParamKind::Weight),
            b1: make(1, d_hidden, ParamKind::Bias),
            w2: make(d_hidden, d_out, ParamKind::Weight),
            b2: make(1, d_out, ParamKind::Bias),
        };
        let ln = |make: &mut dyn FnMut(usize, usize, ParamKind) -> Tensor| LayerNormParams {
            gamma: make(1, d, ParamKind::Gain),
            beta: make(1, d, ParamKind::Bias),
        };
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1: ln(&mut make),
                w_qkv: make(d, 3 * d, ParamKind::Weight),
                b_qkv: make(1, 3 * d, ParamKind::Bias),
                w_o: make(d, d, ParamKind::Weight),
                b_o: make(1, d, ParamKind::Bias),
                ln2: ln(&mut make),
                ff: mlp(&mut make, d, cfg.d_ff, d),
            })
            .collect();
        Ok(Model {
            slopes: alibi_slopes(cfg.n_heads),
            embed_token: make(v, d, ParamKind::Weight),
            embed_measure: make(m, d, ParamKind::Weight),
            embed_ordinal: make(crate::vocab::N_BINS, d, ParamKind::Weight),
            time_mlp: mlp(&mut make, 1, d, d),
            blocks,
            ln_f: ln(&mut make),
            time_head: mlp(&mut make, d, d, 3),
            layout: vocab.layout().to_vec(),
            vocab_len: v,
            n_measures: vocab.n_measures(),
            cfg,
        })
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab_len
    }

    pub fn n_measures(&self) -> usize {
        self.n_measures
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn layout(&self) -> &[RowSource] {
        &self.layout
    }

    /// Canonical parameter order: stable across runs, used by the
    /// optimizer and checkpoints.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = vec![
            ("embed.token".into(), self.embed_token.clone()),
            ("embed.measure".into(), self.embed_measure.clone()),
            ("embed.ordinal".into(), self.embed_ordinal.clone()),
        ];
        let mlp = |prefix: &str, m: &Mlp, out: &mut Vec<(String, Tensor)>| {
            out.push((format!("{prefix}.w1"), m.w1.clone()));
            out.push((format!("{prefix}.b1"), m.b1.clone()));
            out.push((format!("{prefix}.w2"), m.w2.clone()));
            out.push((format!("{prefix}.b2"), m.b2.clone()));
        };
        mlp("time_mlp", &self.time_mlp, &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1.gamma"), b.ln1.gamma.clone()));
            out.push((format!("block{i}.ln1.beta"), b.ln1.beta.clone()));
            out.push((format!("block{i}.attn.w_qkv"), b.w_qkv.clone()));
            out.push((format!("block{i}.attn.b_qkv"), b.b_qkv.clone()));
            out.push((format!("block{i}.attn.w_o"), b.w_o.clone()));
            out.push((format!("block{i}.attn.b_o"), b.b_o.clone()));
            out.push((format!("block{i}.ln2.gamma"), b.ln2.gamma.clone()));
            out.push((format!("block{i}.ln2.beta"), b.ln2.beta.clone()));
            mlp(&format!("block{i}.ff"), &b.ff, &mut out);
        }
        out.push(("ln_f.gamma".into(), self.ln_f.gamma.clone()));
        out.push(("ln_f.beta".into(), self.ln_f.beta.clone()));
        mlp("time_head", &self.time_head, &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    /// The effective `V x d_model` embedding matrix: plain rows for most
    /// tokens, measure-plus-ordinal sums for LAB/VITAL quintiles. Tied to
    /// the output projection by construction.
    pub fn composed_embedding(&self) -> Result<Tensor> {
        Tensor::compose_embedding(
            &self.embed_token,
            &self.embed_measure,
            &self.embed_ordinal,
            &self.layout,
        )
    }

    /// Full teacher-forcing forward over a padded batch; `tokens` and
    /// `deltas` are flattened `bsz x seq_len` row-major.
    pub fn forward(
        &self,
        tokens: &[usize],
        deltas: &[f64],
        bsz: usize,
        seq_len: usize,
    ) -> Result<ForwardOutput> {
        let rows = bsz * seq_len;
        if tokens.len() != rows || deltas.len() != rows {
            return Err(Error::Model(format!(
                "forward expects {rows} positions, got {} tokens / {} deltas",
                tokens.len(),
                deltas.len()
            )));
        }
        if seq_len > self.cfg.max_seq_len {
            return Err(Error::Model(format!(
                "sequence length {seq_len} exceeds max {}",
                self.cfg.max_seq_len
            )));
        }
        let e_hat = self.composed_embedding()?;
        let tok_emb = e_hat.gather_rows(tokens)?;
        let time_feat = Tensor::from_vec(
            rows,
            1,
            deltas.iter().map(|&d| (1.0 + d).ln()).collect(),
        )?;
        let time_emb = mlp_forward(&self.time_mlp, &time_feat)?;
        let mut h = tok_emb.add(&time_emb)?;

        for b in &self.blocks {
            let a = h.layer_norm(&b.ln1.gamma, &b.ln1.beta, LN_EPS)?;
            let qkv = a.matmul(&b.w_qkv)?.add(&b.b_qkv)?;
            let attn = Tensor::attention(&qkv, bsz, seq_len, &self.slopes)?;
            let o = attn.matmul(&b.w_o)?.add(&b.b_o)?;
            h = h.add(&o)?;
            let f = h.layer_norm(&b.ln2.gamma, &b.ln2.beta, LN_EPS)?;
            let ff = mlp_forward(&b.ff, &f)?;
            h = h.add(&ff)?;
        }
        let hidden = h.layer_norm(&self.ln_f.gamma, &self.ln_f.beta, LN_EPS)?;
        let logits = hidden.matmul_bt(&e_hat)?;
        let time_params = mlp_forward(&self.time_head, &hidden)?;
        Ok(ForwardOutput {
            hidden,
            logits,
            time_params,
        })
    }

    /// Composite training loss over a batch:
    /// family-weighted cross-entropy, plus the ZILN gap likelihood, plus
    /// the ordinal earth-mover term for quintile targets.
    pub fn loss(&self, batch: &Batch) -> Result<LossOutput> {
        let out = self.forward(
            &batch.input_tokens,
            &batch.input_deltas,
            batch.bsz,
            batch.seq_len,
        )?;
        self.loss_from_forward(&out, batch)
    }

    pub fn loss_from_forward(&self, out: &ForwardOutput, batch: &Batch) -> Result<LossOutput> {
        let ce = Tensor::weighted_cross_entropy(&out.logits, &batch.target_tokens, &batch.weights)?;
        let ziln = Tensor::ziln_nll(&out.time_params, &batch.target_dts, &batch.valid)?;
        let emd = Tensor::ordinal_emd(&out.logits, &batch.emd_groups)?;
        let total = ce
            .add(&ziln.scale(ZILN_WEIGHT))?
            .add(&emd.scale(EMD_WEIGHT))?;
        Ok(LossOutput {
            ce: ce.item()?,
            ziln: ziln.item()?,
            emd: emd.item()?,
            total,
        })
    }
}

enum ParamKind {
    Weight,
    Bias,
    Gain,
}

fn mlp_forward(mlp: &Mlp, x: &Tensor) -> Result<Tensor> {
    let h = x.matmul(&mlp.w1)?.add(&mlp.b1)?.gelu();
    h.matmul(&mlp.w2)?.add(&mlp.b2)
}

// ── Batching ────────────────────────────────────────────────────────────

/// A padded teacher-forcing batch with precomputed targets and loss
/// bookkeeping. Position `p` of sequence `s` is valid iff `p + 1` is
/// still inside `s`; invalid positions carry weight 0.
#[derive(Debug, Clone)]
pub struct Batch {
    pub bsz: usize,
    pub seq_len: usize,
    pub lens: Vec<usize>,
    pub input_tokens: Vec<usize>,
    pub input_deltas: Vec<f64>,
    pub target_tokens: Vec<usize>,
    pub target_dts: Vec<f64>,
    pub weights: Vec<f64>,
    pub valid: Vec<bool>,
    pub emd_groups: Vec<EmdGroup>,
}

impl Batch {
    pub fn from_sequences(
        vocab: &Vocabulary,
        seqs: &[&PatientSequence],
        max_seq_len: usize,
    ) -> Result<Batch> {
        if seqs.is_empty() {
            return Err(Error::Model("empty batch".into()));
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.len().min(max_seq_len)).collect();
        let seq_len = *lens.iter().max().expect("nonempty batch");
        let bsz = seqs.len();
        let rows = bsz * seq_len;
        let mut batch = Batch {
            bsz,
            seq_len,
            lens,
            input_tokens: vec![crate::vocab::PAD.index(); rows],
            input_deltas: vec![0.0; rows],
            target_tokens: vec![0; rows],
            target_dts: vec![0.0; rows],
            weights: vec![0.0; rows],
            valid: vec![false; rows],
            emd_groups: Vec::new(),
        };
        for (s, seq) in seqs.iter().enumerate() {
            let len = batch.lens[s];
            for p in 0..len {
                let row = s * seq_len + p;
                batch.input_tokens[row] = seq.tokens[p].index();
                batch.input_deltas[row] = seq.deltas[p];
                if p + 1 < len {
                    let target = seq.tokens[p + 1];
                    batch.target_tokens[row] = target.index();
                    batch.target_dts[row] = seq.deltas[p + 1];
                    batch.weights[row] = family_weight(vocab.kind(target).family());
                    batch.valid[row] = true;
                    if let (Some(sib), Some(bin)) =
                        (vocab.siblings_of(target), vocab.kind(target).ordinal_bin())
                    {
                        batch.emd_groups.push(EmdGroup {
                            row,
                            ids: [
                                sib[0].index(),
                                sib[1].index(),
                                sib[2].index(),
                                sib[3].index(),
                                sib[4].index(),
                            ],
                            target_bin: (bin - 1) as usize,
                        });
                    }
                }
            }
        }
        Ok(batch)
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::PatientSequence;
    use crate::numerics::check_gradients;
    use crate::vocab::{build_vocabulary, TokenId, VocabRecipe, BOS, EOS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_vocab() -> Vocabulary {
        build_vocabulary(&VocabRecipe {
            lab_measures: vec!["A1C".into(), "LDL".into()],
            vital_measures: vec!["SBP".into()],
            med_classes: vec!["STATIN".into()],
            med_drugs: vec![],
            dx_codes: vec!["E11".into()],
            sexes: vec!["F".into(), "M".into()],
            smoke_levels: vec!["NEVER".into()],
        })
        .unwrap()
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
        }
    }

    fn seq(vocab: &Vocabulary, tokens: &[&str], deltas: &[f64]) -> PatientSequence {
        PatientSequence {
            patient_id: 0,
            tokens: tokens.iter().map(|t| vocab.id(t).unwrap()).collect(),
            deltas: deltas.to_vec(),
        }
    }

    #[test]
    fn alibi_slopes_follow_the_power_schedule() {
        let s8 = alibi_slopes(8);
        for (h, s) in s8.iter().enumerate() {
            assert!((s - 2f64.powi(-(h as i32 + 1))).abs() < 1e-15);
        }
        let s4 = alibi_slopes(4);
        assert_eq!(s4, vec![0.25, 0.0625, 0.015625, 0.00390625]);
    }

    #[test]
    fn zero_init_gives_uniform_logits() {
        let vocab = test_vocab();
        let model = Model::zero_init(tiny_cfg(), &vocab).unwrap();
        let out = model.forward(&[1, 5, 9], &[0.0, 1.0, 2.0], 1, 3).unwrap();
        let logits = out.logits.to_vec();
        for &l in &logits {
            assert!(
                (l - logits[0]).abs() < 1e-12,
                "tied zero weights must give uniform logits"
            );
        }
        // Uniform logits: weighted CE with unit weights equals ln V.
        let ce = Tensor::weighted_cross_entropy(&out.logits, &[0, 0, 0], &[1.0, 1.0, 1.0])
            .unwrap()
            .item()
            .unwrap();
        assert!((ce - (vocab.len() as f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn factored_rows_equal_measure_plus_ordinal() {
        let vocab = test_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::new(tiny_cfg(), &vocab, &mut rng).unwrap();
        let table = model.composed_embedding().unwrap().to_vec();
        let d = model.cfg.d_model;
        let mea = model.embed_measure.to_vec();
        let ord = model.embed_ordinal.to_vec();
        let id = vocab.id("LAB:LDL:Q2").unwrap().index();
        let RowSource::Factored { measure, ordinal } = vocab.layout()[id] else {
            panic!("LAB token must be factored");
        };
        for j in 0..d {
            let expect = mea[measure * d + j] + ord[ordinal * d + j];
            assert!((table[id * d + j] - expect).abs() < 1e-15);
        }
        // Plain tokens pass through the token table.
        let med = vocab.id("MED:STATIN").unwrap().index();
        let tok = model.embed_token.to_vec();
        for j in 0..d {
            assert_eq!(table[med * d + j], tok[med * d + j]);
        }
    }

    #[test]
    fn forward_is_causal_at_the_model_level() {
        let vocab = test_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::new(tiny_cfg(), &vocab, &mut rng).unwrap();
        let tokens_a = vec![1usize, 4, 20, 9, 2];
        let mut tokens_b = tokens_a.clone();
        tokens_b[4] = 25;
        let deltas = vec![0.0, 0.0, 3.0, 7.0, 1.0];
        let la = model.forward(&tokens_a, &deltas, 1, 5).unwrap().logits.to_vec();
        let lb = model.forward(&tokens_b, &deltas, 1, 5).unwrap().logits.to_vec();
        let v = vocab.len();
        assert_eq!(&la[..4 * v], &lb[..4 * v], "earlier positions saw the future");
        assert_ne!(&la[4 * v..], &lb[4 * v..]);
    }

    #[test]
    fn batch_layout_shifts_targets_and_masks_padding() {
        let vocab = test_vocab();
        let s1 = seq(
            &vocab,
            &["[BOS]", "SEX:F", "LAB:A1C:Q4", "[EOS]"],
            &[0.0, 0.0, 30.0, 10.0],
        );
        let s2 = seq(&vocab, &["[BOS]", "DX:E11", "[EOS]"], &[0.0, 5.0, 2.0]);
        let batch = Batch::from_sequences(&vocab, &[&s1, &s2], 32).unwrap();
        assert_eq!(batch.seq_len, 4);
        assert_eq!(batch.lens, vec![4, 3]);
        // Position 2 of s1 targets [EOS] with gap 10.
        let row = 2;
        assert_eq!(batch.target_tokens[row], EOS.index());
        assert_eq!(batch.target_dts[row], 10.0);
        assert_eq!(batch.weights[row], 1.0);
        // Last position of each sequence has no target.
        assert!(!batch.valid[3]);
        assert_eq!(batch.weights[3], 0.0);
        // Padded tail of s2: input PAD, invalid.
        assert_eq!(batch.input_tokens[4 + 3], crate::vocab::PAD.index());
        assert!(!batch.valid[4 + 3]);
        // The A1C:Q4 target produces exactly one EMD group with bin 3.
        assert_eq!(batch.emd_groups.len(), 1);
        assert_eq!(batch.emd_groups[0].row, 1);
        assert_eq!(batch.emd_groups[0].target_bin, 3);
        // DX target carries weight 3.
        assert_eq!(batch.weights[4], 3.0);
        // Family weights on the s1 row 1: target LAB -> 2.0.
        assert_eq!(batch.weights[1], 2.0);
    }

    #[test]
    fn batch_truncates_to_max_len() {
        let vocab = test_vocab();
        let bos = BOS;
        let dx = vocab.id("DX:E11").unwrap();
        let s = PatientSequence {
            patient_id: 0,
            tokens: std::iter::once(bos)
                .chain(std::iter::repeat(dx).take(10))
                .collect(),
            deltas: std::iter::once(0.0).chain((0..10).map(|_| 1.0)).collect(),
        };
        let batch = Batch::from_sequences(&vocab, &[&s], 6).unwrap();
        assert_eq!(batch.seq_len, 6);
        assert_eq!(batch.lens, vec![6]);
    }

    #[test]
    fn whole_model_gradient_check() {
        let vocab = test_vocab();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = Model::new(cfg, &vocab, &mut rng).unwrap();
        let s1 = seq(
            &vocab,
            &["[BOS]", "SEX:M", "LAB:A1C:Q4", "MED:STATIN", "LAB:A1C:Q2", "[EOS]"],
            &[0.0, 0.0, 10.0, 0.0, 45.0, 30.0],
        );
        let s2 = seq(
            &vocab,
            &["[BOS]", "SEX:F", "VITAL:SBP:Q5", "[DEATH]"],
            &[0.0, 0.0, 3.0, 14.0],
        );
        let batch = Batch::from_sequences(&vocab, &[&s1, &s2], 16).unwrap();
        let report = check_gradients(
            &model.named_params(),
            || Ok(model.loss(&batch)?.total),
            1e-4,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-3,
            "worst {:?} at {}",
            report.worst_tensor,
            report.max_rel_err
        );
    }

    #[test]
    fn loss_composes_the_three_terms() {
        let vocab = test_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = Model::new(tiny_cfg(), &vocab, &mut rng).unwrap();
        let s = seq(
            &vocab,
            &["[BOS]", "LAB:A1C:Q1", "LAB:A1C:Q5", "[EOS]"],
            &[0.0, 2.0, 90.0, 1.0],
        );
        let batch = Batch::from_sequences(&vocab, &[&s], 32).unwrap();
        let out = model.loss(&batch).unwrap();
        let expect = out.ce + ZILN_WEIGHT * out.ziln + EMD_WEIGHT * out.emd;
        assert!((out.total.item().unwrap() - expect).abs() < 1e-12);
        assert!(out.emd > 0.0, "ordinal targets must engage the EMD term");
    }

    #[test]
    fn param_count_matches_hand_formula() {
        let vocab = test_vocab();
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(cfg, &vocab, &mut rng).unwrap();
        let d = cfg.d_model;
        let v = vocab.len();
        let m = vocab.n_measures();
        let per_block = 2 * d + d * 3 * d + 3 * d + d * d + d + 2 * d
            + d * cfg.d_ff + cfg.d_ff + cfg.d_ff * d + d;
        let expect = (v + m + 5) * d            // embeddings
            + (d + d + d * d + d)               // time mlp
            + cfg.n_layers * per_block
            + 2 * d                             // final layer norm
            + (d * d + d + d * 3 + 3); // time head
        assert_eq!(model.param_count(), expect);
    }

    #[test]
    fn scaled_preset_parameter_budget() {
        // The reference configuration must land near 14.5M parameters
        // for a vocabulary of the usual synthetic-cohort size.
        let vocab = test_vocab();
        let model = Model::zero_init(ModelConfig::scaled(), &vocab).unwrap();
        let count = model.param_count() as f64;
        assert!(
            (count - 14.5e6).abs() / 14.5e6 < 0.02,
            "scaled preset has {count} params"
        );
    }

    #[test]
    fn rejects_overlong_sequences_and_bad_config() {
        let vocab = test_vocab();
        let model = Model::zero_init(tiny_cfg(), &vocab).unwrap();
        let tokens: Vec<usize> = vec![1; 40];
        let deltas = vec![0.0; 40];
        assert!(model.forward(&tokens, &deltas, 1, 40).is_err());
        let bad = ModelConfig {
            n_heads: 5,
            ..tiny_cfg()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn extra_padding_changes_nothing() {
        // Widening the padded tail must leave loss and gradients exactly
        // alone: pad positions carry no loss and are never attended by
        // real positions.
        let vocab = test_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::new(tiny_cfg(), &vocab, &mut rng).unwrap();
        let s1 = seq(
            &vocab,
            &["[BOS]", "SEX:F", "DX:E11", "MED:STATIN", "[EOS]"],
            &[0.0, 0.0, 4.0, 2.0, 9.0],
        );
        let s2 = seq(&vocab, &["[BOS]", "[EOS]"], &[0.0, 1.0]);
        let tight = Batch::from_sequences(&vocab, &[&s1, &s2], 32).unwrap();

        // Same batch, re-laid-out with two extra columns of padding.
        let wide_len = tight.seq_len + 2;
        let rows = tight.bsz * wide_len;
        let mut wide = Batch {
            bsz: tight.bsz,
            seq_len: wide_len,
            lens: tight.lens.clone(),
            input_tokens: vec![TokenId(0).index(); rows],
            input_deltas: vec![0.0; rows],
            target_tokens: vec![0; rows],
            target_dts: vec![0.0; rows],
            weights: vec![0.0; rows],
            valid: vec![false; rows],
            emd_groups: Vec::new(),
        };
        for s in 0..tight.bsz {
            for p in 0..tight.seq_len {
                let from = s * tight.seq_len + p;
                let to = s * wide_len + p;
                wide.input_tokens[to] = tight.input_tokens[from];
                wide.input_deltas[to] = tight.input_deltas[from];
                wide.target_tokens[to] = tight.target_tokens[from];
                wide.target_dts[to] = tight.target_dts[from];
                wide.weights[to] = tight.weights[from];
                wide.valid[to] = tight.valid[from];
            }
        }
        for g in &tight.emd_groups {
            let s = g.row / tight.seq_len;
            let p = g.row % tight.seq_len;
            wide.emd_groups.push(crate::numerics::EmdGroup {
                row: s * wide_len + p,
                ids: g.ids,
                target_bin: g.target_bin,
            });
        }

        let lt = model.loss(&tight).unwrap();
        lt.total.backward().unwrap();
        let g_tight = model.embed_token.grad().unwrap();
        model.zero_grad();
        let lw = model.loss(&wide).unwrap();
        lw.total.backward().unwrap();
        let g_wide = model.embed_token.grad().unwrap();

        assert!((lt.total.item().unwrap() - lw.total.item().unwrap()).abs() < 1e-12);
        for (a, b) in g_tight.iter().zip(&g_wide) {
            assert!((a - b).abs() < 1e-12, "gradient moved under padding");
        }
    }
}
