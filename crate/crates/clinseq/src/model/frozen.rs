//! Immutable inference snapshot of a model.
//!
//! [`FrozenModel`] copies all weights into plain buffers (no `Rc`, no
//! graph), so it is `Send + Sync` and can score or sample sequences from
//! worker threads while training continues on the live model. Decoding
//! is incremental: [`DecodeState`] keeps per-layer key/value caches, so
//! generating a trajectory costs O(L^2 d) total instead of O(L^3 d) from
//! re-running full forwards.

use crate::cohort::PatientSequence;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, LN_EPS};
use crate::numerics::tensor::gelu_scalar;

struct FrozenMlp {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
}

impl FrozenMlp {
    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        let mut h = vec![0.0; self.d_hidden];
        matvec(x, &self.w1, &self.b1, self.d_in, self.d_hidden, &mut h);
        for v in &mut h {
            *v = gelu_scalar(*v);
        }
        out.resize(self.d_out, 0.0);
        matvec(&h, &self.w2, &self.b2, self.d_hidden, self.d_out, out);
    }
}

struct FrozenBlock {
    ln1_gamma: Vec<f64>,
    ln1_beta: Vec<f64>,
    w_qkv: Vec<f64>,
    b_qkv: Vec<f64>,
    w_o: Vec<f64>,
    b_o: Vec<f64>,
    ln2_gamma: Vec<f64>,
    ln2_beta: Vec<f64>,
    ff: FrozenMlp,
}

/// Weight snapshot for inference: scoring, sampling, scheduled-sampling
/// rollouts.
pub struct FrozenModel {
    pub cfg: ModelConfig,
    vocab_len: usize,
    /// Composed `V x d` embedding, also the tied output projection.
    e_hat: Vec<f64>,
    time_mlp: FrozenMlp,
    blocks: Vec<FrozenBlock>,
    ln_f_gamma: Vec<f64>,
    ln_f_beta: Vec<f64>,
    time_head: FrozenMlp,
    slopes: Vec<f64>,
}

impl FrozenModel {
    pub fn from_model(model: &Model) -> Result<Self> {
        let d = model.cfg.d_model;
        let freeze_mlp = |m: &crate::model::Mlp| FrozenMlp {
            d_in: m.w1.rows(),
            d_hidden: m.w1.cols(),
            d_out: m.w2.cols(),
            w1: m.w1.to_vec(),
            b1: m.b1.to_vec(),
            w2: m.w2.to_vec(),
            b2: m.b2.to_vec(),
        };
        Ok(FrozenModel {
            cfg: model.cfg,
            vocab_len: model.vocab_len(),
            e_hat: crate::numerics::no_grad(|| model.composed_embedding())?.to_vec(),
            time_mlp: freeze_mlp(&model.time_mlp),
            blocks: model
                .blocks
                .iter()
                .map(|b| FrozenBlock {
                    ln1_gamma: b.ln1.gamma.to_vec(),
                    ln1_beta: b.ln1.beta.to_vec(),
                    w_qkv: b.w_qkv.to_vec(),
                    b_qkv: b.b_qkv.to_vec(),
                    w_o: b.w_o.to_vec(),
                    b_o: b.b_o.to_vec(),
                    ln2_gamma: b.ln2.gamma.to_vec(),
                    ln2_beta: b.ln2.beta.to_vec(),
                    ff: freeze_mlp(&b.ff),
                })
                .collect(),
            ln_f_gamma: model.ln_f.gamma.to_vec(),
            ln_f_beta: model.ln_f.beta.to_vec(),
            time_head: freeze_mlp(&model.time_head),
            slopes: model.slopes().to_vec(),
        })
        .and_then(|f| {
            if f.e_hat.len() != f.vocab_len * d {
                return Err(Error::Model("embedding table shape drift".into()));
            }
            Ok(f)
        })
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab_len
    }

    pub fn decode_state(&self) -> DecodeState {
        DecodeState {
            pos: 0,
            k_cache: vec![Vec::new(); self.cfg.n_layers],
            v_cache: vec![Vec::new(); self.cfg.n_layers],
        }
    }

    /// Runs the whole sequence through the incremental decoder, returning
    /// per-position next-token logits (`len x V`) and ZILN parameters
    /// (`len x 3`).
    pub fn full_forward(&self, tokens: &[usize], deltas: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if tokens.len() != deltas.len() {
            return Err(Error::Model(format!(
                "{} tokens vs {} deltas",
                tokens.len(),
                deltas.len()
            )));
        }
        let v = self.vocab_len;
        let mut state = self.decode_state();
        let mut logits = Vec::with_capacity(tokens.len() * v);
        let mut time = Vec::with_capacity(tokens.len() * 3);
        let mut step_logits = vec![0.0; v];
        let mut step_time = [0.0; 3];
        for (&t, &dt) in tokens.iter().zip(deltas) {
            self.step(&mut state, t, dt, &mut step_logits, &mut step_time)?;
            logits.extend_from_slice(&step_logits);
            time.extend_from_slice(&step_time);
        }
        Ok((logits, time))
    }

    /// One decode step: feeds `(token, dt)` at the next position and
    /// writes next-token logits plus ZILN parameters for that position.
    pub fn step(
        &self,
        state: &mut DecodeState,
        token: usize,
        dt: f64,
        logits_out: &mut [f64],
        time_out: &mut [f64; 3],
    ) -> Result<()> {
        let d = self.cfg.d_model;
        let v = self.vocab_len;
        if token >= v {
            return Err(Error::Model(format!("token id {token} out of vocab {v}")));
        }
        if logits_out.len() != v {
            return Err(Error::Model(format!(
                "logits buffer {} != vocab {v}",
                logits_out.len()
            )));
        }
        if state.pos >= self.cfg.max_seq_len {
            return Err(Error::Model(format!(
                "decode position {} exceeds max_seq_len {}",
                state.pos, self.cfg.max_seq_len
            )));
        }
        let n_heads = self.slopes.len();
        let dh = d / n_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let i = state.pos;

        // x = E_hat[token] + time_mlp(log1p(dt))
        let mut x = self.e_hat[token * d..(token + 1) * d].to_vec();
        let mut scratch = Vec::new();
        self.time_mlp.forward(&[(1.0 + dt).ln()], &mut scratch);
        for (a, b) in x.iter_mut().zip(&scratch) {
            *a += b;
        }

        let mut a = vec![0.0; d];
        let mut qkv = vec![0.0; 3 * d];
        let mut attn = vec![0.0; d];
        let mut o = vec![0.0; d];
        for (l, blk) in self.blocks.iter().enumerate() {
            layer_norm_row(&x, &blk.ln1_gamma, &blk.ln1_beta, &mut a);
            matvec(&a, &blk.w_qkv, &blk.b_qkv, d, 3 * d, &mut qkv);
            state.k_cache[l].extend_from_slice(&qkv[d..2 * d]);
            state.v_cache[l].extend_from_slice(&qkv[2 * d..3 * d]);
            let keys = &state.k_cache[l];
            let vals = &state.v_cache[l];
            attn.iter_mut().for_each(|z| *z = 0.0);
            for (h, &slope) in self.slopes.iter().enumerate() {
                let q = &qkv[h * dh..(h + 1) * dh];
                // Scores over cached positions j = 0..=i.
                let mut scores = Vec::with_capacity(i + 1);
                let mut m = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                    let dot: f64 = q.iter().zip(kj).map(|(x, y)| x * y).sum();
                    let s = dot * inv_sqrt - slope * (i - j) as f64;
                    if s > m {
                        m = s;
                    }
                    scores.push(s);
                }
                let mut z = 0.0;
                for s in &mut scores {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let out = &mut attn[h * dh..(h + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vj = &vals[j * d + h * dh..j * d + (h + 1) * dh];
                    let w = p / z;
                    for (acc, &vv) in out.iter_mut().zip(vj) {
                        *acc += w * vv;
                    }
                }
            }
            matvec(&attn, &blk.w_o, &blk.b_o, d, d, &mut o);
            for (xx, oo) in x.iter_mut().zip(&o) {
                *xx += oo;
            }
            layer_norm_row(&x, &blk.ln2_gamma, &blk.ln2_beta, &mut a);
            blk.ff.forward(&a, &mut scratch);
            for (xx, ff) in x.iter_mut().zip(&scratch) {
                *xx += ff;
            }
        }
        let mut hidden = vec![0.0; d];
        layer_norm_row(&x, &self.ln_f_gamma, &self.ln_f_beta, &mut hidden);

        // Tied output: logits = hidden . E_hat[row] per vocab row.
        for (row, l) in logits_out.iter_mut().enumerate() {
            let e = &self.e_hat[row * d..(row + 1) * d];
            *l = hidden.iter().zip(e).map(|(x, y)| x * y).sum();
        }
        self.time_head.forward(&hidden, &mut scratch);
        time_out.copy_from_slice(&scratch[..3]);
        state.pos += 1;
        Ok(())
    }
}

/// Growing per-layer key/value caches for incremental decoding.
pub struct DecodeState {
    pos: usize,
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
}

impl DecodeState {
    pub fn pos(&self) -> usize {
        self.pos
    }
}

fn matvec(x: &[f64], w: &[f64], b: &[f64], d_in: usize, d_out: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(b);
    debug_assert_eq!(out.len(), d_out);
    for (i, &xv) in x.iter().enumerate().take(d_in) {
        if xv == 0.0 {
            continue;
        }
        let wrow = &w[i * d_out..(i + 1) * d_out];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xv * wv;
        }
    }
}

fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for ((o, &xv), (&g, &b)) in out.iter_mut().zip(x).zip(gamma.iter().zip(beta)) {
        *o = (xv - mean) * inv * g + b;
    }
}

// ── Scoring ─────────────────────────────────────────────────────────────

/// Anything that can assign next-token log probabilities to a sequence:
/// the transformer, or the n-gram baselines. Lets perplexity evaluation
/// treat them identically.
pub trait NextTokenScorer: Send + Sync {
    /// `ln P(tokens[i] | tokens[..i])` for each `i >= 1`.
    fn sequence_log_probs(&self, seq: &PatientSequence) -> Result<Vec<f64>>;
}

impl NextTokenScorer for FrozenModel {
    fn sequence_log_probs(&self, seq: &PatientSequence) -> Result<Vec<f64>> {
        let len = seq.len().min(self.cfg.max_seq_len);
        if len < 2 {
            return Ok(Vec::new());
        }
        let v = self.vocab_len;
        let mut state = self.decode_state();
        let mut logits = vec![0.0; v];
        let mut time = [0.0; 3];
        let mut out = Vec::with_capacity(len - 1);
        for i in 0..len - 1 {
            self.step(
                &mut state,
                seq.tokens[i].index(),
                seq.deltas[i],
                &mut logits,
                &mut time,
            )?;
            let target = seq.tokens[i + 1].index();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
            out.push(logits[target] - lse);
        }
        Ok(out)
    }
}

/// Teacher-forcing perplexity: `exp` of the mean next-token NLL over all
/// scored positions of all sequences, unweighted.
pub fn teacher_forcing_perplexity<S: NextTokenScorer + ?Sized>(
    scorer: &S,
    seqs: &[PatientSequence],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in seqs {
        for lp in scorer.sequence_log_probs(seq)? {
            total -= lp;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Model("no scoreable positions".into()));
    }
    Ok((total / count as f64).exp())
}
