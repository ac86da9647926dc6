//! Line-delimited JSON cohort ingestion and persistence.
//!
//! One patient per line, `{"patient_id", "split"?, "tokens", "deltas"}`.
//! Parse and validation failures name the offending line; an empty file
//! is an empty cohort plus a warning, not an error.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::cohort::{encode_sequence, validate_sequence, PatientSequence, RawSequence, Split};
use crate::error::{Error, Result};
use crate::vocab::{UnknownStats, Vocabulary};

/// A cohort as read from disk: encoded sequences, the per-patient split
/// labels that rode along (None where the line had none), and the
/// unknown-token tally from encoding.
#[derive(Debug)]
pub struct LoadedCohort {
    pub patients: Vec<PatientSequence>,
    pub splits: Vec<Option<Split>>,
    pub unknown: UnknownStats,
}

impl LoadedCohort {
    /// Patients labeled with the given split. Unlabeled patients belong
    /// to no split and are never returned here.
    pub fn split(&self, which: Split) -> Vec<PatientSequence> {
        self.patients
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == Some(which))
            .map(|(p, _)| p.clone())
            .collect()
    }

    /// All patients regardless of label.
    pub fn all(&self) -> &[PatientSequence] {
        &self.patients
    }
}

fn data_err(path: &Path, line: usize, reason: String) -> Error {
    Error::Data {
        path: path.display().to_string(),
        line,
        reason,
    }
}

/// Reads raw JSONL sequences without vocabulary encoding.
pub fn read_raw(path: &Path) -> Result<Vec<RawSequence>> {
    let file = File::open(path).map_err(|e| data_err(path, 0, e.to_string()))?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| data_err(path, i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSequence =
            serde_json::from_str(&line).map_err(|e| data_err(path, i + 1, e.to_string()))?;
        if raw.tokens.len() != raw.deltas_days.len() {
            return Err(data_err(
                path,
                i + 1,
                format!(
                    "{} tokens but {} deltas",
                    raw.tokens.len(),
                    raw.deltas_days.len()
                ),
            ));
        }
        if let Some(bad) = raw.deltas_days.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(data_err(path, i + 1, format!("invalid gap {bad}")));
        }
        rows.push(raw);
    }
    if rows.is_empty() {
        eprintln!("warning: {} holds no sequences", path.display());
    }
    Ok(rows)
}

/// Reads and vocabulary-encodes a JSONL cohort. Unknown tokens map to
/// `[PAD]` and are tallied; structural violations are fatal with the
/// line number.
pub fn read_patients(path: &Path, vocab: &Vocabulary) -> Result<LoadedCohort> {
    let raws = read_raw(path)?;
    let mut unknown = UnknownStats::default();
    let mut patients = Vec::with_capacity(raws.len());
    let mut splits = Vec::with_capacity(raws.len());
    for (i, raw) in raws.iter().enumerate() {
        let seq = encode_sequence(vocab, raw, &mut unknown)
            .map_err(|e| data_err(path, i + 1, e.to_string()))?;
        patients.push(seq);
        splits.push(raw.split);
    }
    if unknown.unknown > 0 {
        eprintln!(
            "warning: {} of {} tokens in {} were out of vocabulary (mapped to [PAD])",
            unknown.unknown,
            unknown.total,
            path.display()
        );
    }
    Ok(LoadedCohort {
        patients,
        splits,
        unknown,
    })
}

/// Writes a cohort as JSONL, one decoded patient per line. `splits`
/// must be empty or one label per patient.
pub fn write_patients(
    path: &Path,
    patients: &[PatientSequence],
    vocab: &Vocabulary,
    splits: &[Split],
) -> Result<()> {
    if !splits.is_empty() && splits.len() != patients.len() {
        return Err(Error::Config(format!(
            "{} split labels for {} patients",
            splits.len(),
            patients.len()
        )));
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for (i, p) in patients.iter().enumerate() {
        validate_sequence(p)?;
        let mut raw = crate::cohort::decode_sequence(vocab, p);
        raw.split = splits.get(i).copied();
        serde_json::to_writer(&mut w, &raw)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::assign_splits;
    use crate::synth::{generate_cohort, CohortConfig, TimingConfig};
    use crate::vocab::build_vocabulary;
    use std::collections::BTreeMap;

    fn small_cohort() -> (Vec<PatientSequence>, Vocabulary) {
        let cfg = CohortConfig {
            n_patients: 20,
            n_measures: 2,
            n_med_classes: 1,
            n_dx: 2,
            seq_len: (5, 10),
            timing: TimingConfig {
                p_zero: 0.3,
                mu_t: 2.0,
                sigma_t: 1.0,
            },
            p_drug_decision: 0.15,
            p_dx: 0.10,
            effects: vec![],
            confounding: BTreeMap::new(),
            recency_slope: 0.0,
            mortality_hazard_slope: 0.0,
            seed: 5,
        };
        let vocab = build_vocabulary(&cfg.vocab_recipe()).unwrap();
        let (patients, _) = generate_cohort(&cfg).unwrap();
        (patients, vocab)
    }

    #[test]
    fn write_then_read_is_structurally_equal() {
        let (patients, vocab) = small_cohort();
        let splits = assign_splits(patients.len(), 0.8, 0.1, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.jsonl");
        write_patients(&path, &patients, &vocab, &splits).unwrap();
        let loaded = read_patients(&path, &vocab).unwrap();
        assert_eq!(loaded.patients, patients);
        let read_splits: Vec<Split> = loaded.splits.iter().map(|s| s.unwrap()).collect();
        assert_eq!(read_splits, splits);
        assert_eq!(loaded.unknown.unknown, 0);
        // Delta bit-exactness through JSON.
        for (a, b) in loaded.patients.iter().zip(&patients) {
            for (x, y) in a.deltas.iter().zip(&b.deltas) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn length_mismatch_errors_with_the_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"patient_id":0,"tokens":["[BOS]","SEX:F"],"deltas":[0.0,0.0]}"#,
                "\n",
                r#"{"patient_id":1,"tokens":["[BOS]","SEX:F"],"deltas":[0.0]}"#,
                "\n",
            ),
        )
        .unwrap();
        let err = read_raw(&path).err().unwrap().to_string();
        assert!(err.contains("bad.jsonl:2"), "{err}");
    }

    #[test]
    fn negative_delta_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.jsonl");
        std::fs::write(
            &path,
            r#"{"patient_id":0,"tokens":["[BOS]","SEX:F"],"deltas":[0.0,-1.0]}"#,
        )
        .unwrap();
        let err = read_raw(&path).err().unwrap().to_string();
        assert!(err.contains("neg.jsonl:1"), "{err}");
    }

    #[test]
    fn empty_file_is_an_empty_cohort() {
        let (_, vocab) = small_cohort();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let loaded = read_patients(&path, &vocab).unwrap();
        assert!(loaded.patients.is_empty());
    }

    #[test]
    fn unknown_tokens_map_to_pad_and_are_tallied() {
        let (_, vocab) = small_cohort();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unk.jsonl");
        std::fs::write(
            &path,
            r#"{"patient_id":0,"tokens":["[BOS]","LAB:NOT_A_MEASURE:Q1"],"deltas":[0.0,1.0]}"#,
        )
        .unwrap();
        let loaded = read_patients(&path, &vocab).unwrap();
        assert_eq!(loaded.unknown.unknown, 1);
        assert_eq!(loaded.patients[0].tokens[1], crate::vocab::PAD);
    }
}
