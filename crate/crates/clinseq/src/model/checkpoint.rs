//! Checkpoint format: a single JSON document holding config, vocabulary,
//! named parameters, and (for resumable training runs) optimizer moments
//! and trainer position. Restoring and re-running must reproduce the
//! uninterrupted run bit for bit, which JSON can support because serde's
//! f64 round-trip is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::AdamWState;
use crate::trainer::TrainState;
use crate::vocab::Vocabulary;

pub const CHECKPOINT_FORMAT: &str = "clinseq-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: Vec<ParamBlob>,
    pub optimizer: Option<AdamWState>,
    pub train: Option<TrainState>,
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        vocab: &Vocabulary,
        optimizer: Option<AdamWState>,
        train: Option<TrainState>,
    ) -> Self {
        let params = model
            .named_params()
            .into_iter()
            .map(|(name, t)| ParamBlob {
                name,
                rows: t.rows(),
                cols: t.cols(),
                data: t.to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.cfg,
            vocab: vocab.clone(),
            params,
            optimizer,
            train,
        }
    }

    /// Rebuilds the model exactly: every parameter must be present, with
    /// the stored shape, and finite.
    pub fn restore_model(&self) -> Result<(Model, Vocabulary)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Model(format!(
                "unsupported checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                self.format
            )));
        }
        let vocab = self.vocab.clone();
        let model = Model::zero_init(self.config, &vocab)?;
        let mut by_name: std::collections::HashMap<&str, &ParamBlob> = self
            .params
            .iter()
            .map(|b| (b.name.as_str(), b))
            .collect();
        if by_name.len() != self.params.len() {
            return Err(Error::Model("duplicate parameter names in checkpoint".into()));
        }
        for (name, tensor) in model.named_params() {
            let blob = by_name.remove(name.as_str()).ok_or_else(|| {
                Error::Model(format!("checkpoint missing parameter {name:?}"))
            })?;
            if [blob.rows, blob.cols] != tensor.shape() || blob.data.len() != tensor.len() {
                return Err(Error::Model(format!(
                    "parameter {name:?} has shape {}x{}, expected {}x{}",
                    blob.rows,
                    blob.cols,
                    tensor.rows(),
                    tensor.cols()
                )));
            }
            if let Some(bad) = blob.data.iter().find(|x| !x.is_finite()) {
                return Err(Error::Model(format!(
                    "parameter {name:?} contains non-finite value {bad}"
                )));
            }
            tensor.data_mut().copy_from_slice(&blob.data);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Model(format!(
                "checkpoint has unknown parameter {extra:?}"
            )));
        }
        Ok((model, vocab))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocabulary, VocabRecipe};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::new(cfg(), &v, &mut rng).unwrap();
        let ckpt = Checkpoint::capture(&model, &v, None, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let (restored, _) = loaded.restore_model().unwrap();
        for ((name, a), (_, b)) in model.named_params().iter().zip(restored.named_params()) {
            let av = a.to_vec();
            let bv = b.to_vec();
            for (x, y) in av.iter().zip(&bv) {
                assert_eq!(
                    x.to_bits(),
                    y.to_bits(),
                    "parameter {name} drifted through JSON"
                );
            }
        }
    }

    #[test]
    fn wrong_format_and_missing_params_are_rejected() {
        let v = vocab();
        let model = Model::zero_init(cfg(), &v).unwrap();
        let mut ckpt = Checkpoint::capture(&model, &v, None, None);
        ckpt.format = "something-else".into();
        assert!(ckpt.restore_model().is_err());
        let mut ckpt = Checkpoint::capture(&model, &v, None, None);
        ckpt.params.remove(3);
        let err = ckpt.restore_model().err().unwrap().to_string();
        assert!(err.contains("missing parameter"), "{err}");
        let mut ckpt = Checkpoint::capture(&model, &v, None, None);
        ckpt.params[0].data[0] = f64::NAN;
        assert!(ckpt.restore_model().is_err());
        let mut ckpt = Checkpoint::capture(&model, &v, None, None);
        ckpt.params[2].rows += 1;
        assert!(ckpt.restore_model().is_err());
    }
}
