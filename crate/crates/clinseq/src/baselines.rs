//! Unigram and bigram Markov baselines with empirical time resampling.
//!
//! These are deliberately smoothing-free: token laws are the observed
//! count normalizations, and gaps are drawn uniformly from the observed
//! pools. A bigram row with no observations falls back to the unigram
//! marginal so the sampler is total.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cohort::PatientSequence;
use crate::error::{Error, Result};
use crate::generator::{StopReason, Trajectory};
use crate::model::NextTokenScorer;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone)]
pub struct UnigramModel {
    /// Marginal over the vocabulary; sums to 1.
    probs: Vec<f64>,
    /// Pooled empirical gap sample.
    dt_pool: Vec<f64>,
    terminals: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct BigramModel {
    v: usize,
    /// Row-normalized transitions; rows without support stay all-zero
    /// and defer to the unigram marginal.
    rows: Vec<f64>,
    row_support: Vec<bool>,
    /// Gap pools keyed by (prev, next); pooled backoff lives in
    /// `unigram`.
    dt_pools: HashMap<(u32, u32), Vec<f64>>,
    unigram: UnigramModel,
}

/// Token emissions of a corpus: every position except the leading
/// [BOS], which is structural and never generated.
fn emissions(seq: &PatientSequence) -> impl Iterator<Item = (TokenId, f64)> + '_ {
    seq.tokens
        .iter()
        .copied()
        .zip(seq.deltas.iter().copied())
        .skip(1)
}

pub fn fit_unigram(vocab: &Vocabulary, corpus: &[PatientSequence]) -> Result<UnigramModel> {
    let mut counts = vec![0.0f64; vocab.len()];
    let mut dt_pool = Vec::new();
    for seq in corpus {
        for (t, dt) in emissions(seq) {
            counts[t.index()] += 1.0;
            dt_pool.push(dt);
        }
    }
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return Err(Error::Stats("empty corpus for unigram fit".into()));
    }
    for c in &mut counts {
        *c /= total;
    }
    let terminals = (0..vocab.len())
        .map(|i| vocab.is_terminal(TokenId(i as u32)))
        .collect();
    Ok(UnigramModel {
        probs: counts,
        dt_pool,
        terminals,
    })
}

pub fn fit_bigram(vocab: &Vocabulary, corpus: &[PatientSequence]) -> Result<BigramModel> {
    let unigram = fit_unigram(vocab, corpus)?;
    let v = vocab.len();
    let mut rows = vec![0.0f64; v * v];
    let mut dt_pools: HashMap<(u32, u32), Vec<f64>> = HashMap::new();
    for seq in corpus {
        for i in 0..seq.len().saturating_sub(1) {
            let prev = seq.tokens[i];
            let next = seq.tokens[i + 1];
            rows[prev.index() * v + next.index()] += 1.0;
            dt_pools
                .entry((prev.0, next.0))
                .or_default()
                .push(seq.deltas[i + 1]);
        }
    }
    let mut row_support = vec![false; v];
    for r in 0..v {
        let row = &mut rows[r * v..(r + 1) * v];
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row_support[r] = true;
            for c in row {
                *c /= total;
            }
        }
    }
    Ok(BigramModel {
        v,
        rows,
        row_support,
        dt_pools,
        unigram,
    })
}

impl UnigramModel {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, t: TokenId) -> f64 {
        self.probs[t.index()]
    }
}

impl BigramModel {
    pub fn transition(&self, prev: TokenId, next: TokenId) -> f64 {
        if self.row_support[prev.index()] {
            self.rows[prev.index() * self.v + next.index()]
        } else {
            self.unigram.prob(next)
        }
    }

    pub fn row_has_support(&self, prev: TokenId) -> bool {
        self.row_support[prev.index()]
    }
}

fn draw_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn draw_gap(pool: &[f64], backoff: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let pool = if pool.is_empty() { backoff } else { pool };
    if pool.is_empty() {
        return 0.0;
    }
    pool[rng.gen_range(0..pool.len())]
}

/// An unconditional trajectory sampler: the prompt is carried into the
/// output but (for the unigram entirely, and for the bigram beyond its
/// last token) has no influence on the sampled continuation.
pub trait BaselineSampler {
    fn sample(
        &self,
        prompt: &PatientSequence,
        n_tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Trajectory>;
}

fn finish(
    prompt: &PatientSequence,
    tokens: Vec<TokenId>,
    deltas: Vec<f64>,
    stop: StopReason,
    terminated_by: Option<TokenId>,
) -> Trajectory {
    Trajectory {
        generated_from: prompt.len(),
        seq: PatientSequence {
            patient_id: prompt.patient_id,
            tokens,
            deltas,
        },
        stop,
        terminated_by,
    }
}

impl BaselineSampler for UnigramModel {
    fn sample(
        &self,
        prompt: &PatientSequence,
        n_tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Trajectory> {
        let mut tokens = prompt.tokens.clone();
        let mut deltas = prompt.deltas.clone();
        let mut stop = StopReason::TokenCap;
        let mut terminated_by = None;
        for _ in 0..n_tokens {
            let id = draw_categorical(&self.probs, rng);
            tokens.push(TokenId(id as u32));
            deltas.push(draw_gap(&self.dt_pool, &self.dt_pool, rng));
            if self.terminals[id] {
                stop = StopReason::Terminal;
                terminated_by = Some(TokenId(id as u32));
                break;
            }
        }
        Ok(finish(prompt, tokens, deltas, stop, terminated_by))
    }
}

impl BaselineSampler for BigramModel {
    fn sample(
        &self,
        prompt: &PatientSequence,
        n_tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Trajectory> {
        if prompt.is_empty() {
            return Err(Error::Stats("bigram sampling needs a seed token".into()));
        }
        let mut tokens = prompt.tokens.clone();
        let mut deltas = prompt.deltas.clone();
        let mut prev = *tokens.last().unwrap();
        let mut stop = StopReason::TokenCap;
        let mut terminated_by = None;
        for _ in 0..n_tokens {
            let (id, dt) = if self.row_support[prev.index()] {
                let row = &self.rows[prev.index() * self.v..(prev.index() + 1) * self.v];
                let id = draw_categorical(row, rng);
                let pool = self
                    .dt_pools
                    .get(&(prev.0, id as u32))
                    .map(Vec::as_slice)
                    .unwrap_or(&[]);
                (id, draw_gap(pool, &self.unigram.dt_pool, rng))
            } else {
                // Unigram backoff with the pooled time sample.
                let id = draw_categorical(&self.unigram.probs, rng);
                (id, draw_gap(&[], &self.unigram.dt_pool, rng))
            };
            let tok = TokenId(id as u32);
            tokens.push(tok);
            deltas.push(dt);
            if self.unigram.terminals[id] {
                stop = StopReason::Terminal;
                terminated_by = Some(tok);
                break;
            }
            prev = tok;
        }
        Ok(finish(prompt, tokens, deltas, stop, terminated_by))
    }
}

// Scoring. The laws are the fitted count normalizations with no
// smoothing, so a target the law gives zero mass produces -inf and an
// infinite perplexity: the honest answer for an unsmoothed baseline.

impl NextTokenScorer for UnigramModel {
    fn sequence_log_probs(&self, seq: &PatientSequence) -> Result<Vec<f64>> {
        Ok(seq.tokens[1..]
            .iter()
            .map(|t| self.prob(*t).ln())
            .collect())
    }
}

impl NextTokenScorer for BigramModel {
    fn sequence_log_probs(&self, seq: &PatientSequence) -> Result<Vec<f64>> {
        Ok((1..seq.len())
            .map(|i| self.transition(seq.tokens[i - 1], seq.tokens[i]).ln())
            .collect())
    }
}
