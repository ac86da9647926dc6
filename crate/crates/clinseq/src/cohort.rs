//! Patient sequences and cohort splits.
//!
//! A sequence is a `[BOS]`-prefixed list of composite tokens with a
//! parallel list of inter-event gaps in days. `deltas[i]` is the gap
//! between token `i-1` and token `i`; the first gap is always 0.
//! Demographic tokens carry zero gaps and sit directly after `[BOS]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, subseed};
use crate::vocab::{TokenId, UnknownStats, Vocabulary, BOS};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// String-level sequence as stored in JSONL cohort files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RawSequence {
    pub patient_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub tokens: Vec<String>,
    #[serde(rename = "deltas")]
    pub deltas_days: Vec<f64>,
}

/// Vocabulary-encoded sequence used everywhere past ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientSequence {
    pub patient_id: u64,
    pub tokens: Vec<TokenId>,
    pub deltas: Vec<f64>,
}

impl PatientSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Days elapsed from the sequence start to each position.
    pub fn cumulative_days(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.deltas.len());
        let mut acc = 0.0;
        for &d in &self.deltas {
            acc += d;
            out.push(acc);
        }
        out
    }
}

/// Structural checks shared by ingestion and generation: aligned lengths,
/// `[BOS]` first with zero gap, finite nonnegative gaps.
pub fn validate_sequence(seq: &PatientSequence) -> Result<()> {
    let fail = |reason: String| {
        Err(Error::Data {
            path: format!("patient {}", seq.patient_id),
            line: 0,
            reason,
        })
    };
    if seq.tokens.is_empty() {
        return fail("empty sequence".into());
    }
    if seq.tokens.len() != seq.deltas.len() {
        return fail(format!(
            "{} tokens but {} deltas",
            seq.tokens.len(),
            seq.deltas.len()
        ));
    }
    if seq.tokens[0] != BOS {
        return fail("first token must be [BOS]".into());
    }
    if seq.deltas[0] != 0.0 {
        return fail(format!("first delta must be 0, got {}", seq.deltas[0]));
    }
    if let Some(bad) = seq.deltas.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return fail(format!("invalid gap {bad}"));
    }
    Ok(())
}

/// Encodes a raw sequence, mapping out-of-vocabulary tokens to `[PAD]`
/// and tallying them.
pub fn encode_sequence(
    vocab: &Vocabulary,
    raw: &RawSequence,
    stats: &mut UnknownStats,
) -> Result<PatientSequence> {
    let seq = PatientSequence {
        patient_id: raw.patient_id,
        tokens: raw.tokens.iter().map(|t| vocab.encode(t, stats)).collect(),
        deltas: raw.deltas_days.clone(),
    };
    validate_sequence(&seq)?;
    Ok(seq)
}

pub fn decode_sequence(vocab: &Vocabulary, seq: &PatientSequence) -> RawSequence {
    RawSequence {
        patient_id: seq.patient_id,
        split: None,
        tokens: seq.tokens.iter().map(|&t| vocab.token(t).to_string()).collect(),
        deltas_days: seq.deltas.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Deterministic patient-level partition: a seeded shuffle of the index
/// range, then contiguous slices by fraction. Patient-level means no
/// sequence ever straddles splits.
pub fn split_indices(
    n: usize,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = ChaCha8Rng::seed_from_u64(subseed(seed, &[rng::stream::SPLIT]));
    order.shuffle(&mut r);
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_val = (n as f64 * val_frac).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    (train, val, test)
}

/// Per-index split labels in cohort order, from the same partition as
/// [`split_indices`].
pub fn assign_splits(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Vec<Split> {
    let (train, val, _) = split_indices(n, train_frac, val_frac, seed);
    let mut labels = vec![Split::Test; n];
    for i in train {
        labels[i] = Split::Train;
    }
    for i in val {
        labels[i] = Split::Val;
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocabulary, VocabRecipe, PAD};

    fn vocab() -> Vocabulary {
        build_vocabulary(&VocabRecipe {
            lab_measures: vec!["A1C".into()],
            vital_measures: vec![],
            med_classes: vec!["STATIN".into()],
            med_drugs: vec![],
            dx_codes: vec!["E11".into()],
            sexes: vec!["F".into()],
            smoke_levels: vec!["NEVER".into()],
        })
        .unwrap()
    }

    #[test]
    fn encode_roundtrips_known_tokens() {
        let v = vocab();
        let raw = RawSequence {
            patient_id: 9,
            split: None,
            tokens: vec![
                "[BOS]".into(),
                "SEX:F".into(),
                "LAB:A1C:Q3".into(),
                "[EOS]".into(),
            ],
            deltas_days: vec![0.0, 0.0, 12.5, 3.0],
        };
        let mut stats = UnknownStats::default();
        let enc = encode_sequence(&v, &raw, &mut stats).unwrap();
        assert_eq!(stats.unknown, 0);
        assert_eq!(decode_sequence(&v, &enc), raw);
        assert_eq!(enc.cumulative_days(), vec![0.0, 0.0, 12.5, 15.5]);
    }

    #[test]
    fn unknown_tokens_become_pad_and_are_counted() {
        let v = vocab();
        let raw = RawSequence {
            patient_id: 1,
            split: None,
            tokens: vec!["[BOS]".into(), "DX:UNSEEN".into(), "[EOS]".into()],
            deltas_days: vec![0.0, 1.0, 1.0],
        };
        let mut stats = UnknownStats::default();
        let enc = encode_sequence(&v, &raw, &mut stats).unwrap();
        assert_eq!(enc.tokens[1], PAD);
        assert_eq!(stats.unknown, 1);
    }

    #[test]
    fn structural_violations_are_rejected() {
        let v = vocab();
        let mut stats = UnknownStats::default();
        let cases: Vec<(RawSequence, &str)> = vec![
            (
                RawSequence {
                    patient_id: 1,
                    split: None,
                    tokens: vec!["SEX:F".into()],
                    deltas_days: vec![0.0],
                },
                "first token",
            ),
            (
                RawSequence {
                    patient_id: 2,
                    split: None,
                    tokens: vec!["[BOS]".into(), "SEX:F".into()],
                    deltas_days: vec![0.0],
                },
                "deltas",
            ),
            (
                RawSequence {
                    patient_id: 3,
                    split: None,
                    tokens: vec!["[BOS]".into(), "SEX:F".into()],
                    deltas_days: vec![0.0, -1.0],
                },
                "invalid gap",
            ),
            (
                RawSequence {
                    patient_id: 4,
                    split: None,
                    tokens: vec!["[BOS]".into(), "SEX:F".into()],
                    deltas_days: vec![3.0, 0.0],
                },
                "first delta",
            ),
        ];
        for (raw, needle) in cases {
            let err = encode_sequence(&v, &raw, &mut stats).unwrap_err().to_string();
            assert!(err.contains(needle), "{err} should mention {needle}");
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (tr1, va1, te1) = split_indices(100, 0.8, 0.1, 42);
        let (tr2, va2, te2) = split_indices(100, 0.8, 0.1, 42);
        assert_eq!(tr1, tr2);
        assert_eq!(va1, va2);
        assert_eq!(te1, te2);
        assert_eq!(tr1.len(), 80);
        assert_eq!(va1.len(), 10);
        assert_eq!(te1.len(), 10);
        let mut all: Vec<usize> = tr1.iter().chain(&va1).chain(&te1).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let (tr3, _, _) = split_indices(100, 0.8, 0.1, 43);
        assert_ne!(tr1, tr3, "different seed should reshuffle");
    }
}
