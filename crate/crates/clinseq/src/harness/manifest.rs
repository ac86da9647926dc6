//! Run manifests. Every command writes one into its output directory:
//! the command, the seed, SHA-256 digests of the config and every input
//! file, the tool version, and wall-clock timestamps. Rerunning a
//! command whose manifest matches (everything except the timestamps)
//! must reproduce every other artifact byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn digest_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// Digest of the config/spec document after env overrides, i.e. of
    /// what the run actually consumed.
    pub config_digest: Option<String>,
    /// Input path (as given on the command line) -> content digest.
    pub input_digests: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_digest: None,
            input_digests: BTreeMap::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        }
    }

    pub fn set_config(&mut self, bytes: &[u8]) {
        self.config_digest = Some(sha256_hex(bytes));
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.input_digests
            .insert(path.display().to_string(), digest_file(path)?);
        Ok(())
    }

    /// Stamps the finish time and writes `manifest.json` into `out`.
    pub fn finish(mut self, out: &Path) -> Result<()> {
        self.finished_unix_ms = now_ms();
        let json = serde_json::to_string_pretty(&self)?;
        fs::write(out.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    pub fn load(out: &Path) -> Result<Self> {
        let json = fs::read_to_string(out.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&json)?)
    }

    /// Recomputes every recorded input digest and compares. The run is
    /// replayable only if its inputs are still the bytes it consumed.
    pub fn verify_inputs(&self) -> Result<()> {
        for (path, recorded) in &self.input_digests {
            let current = digest_file(Path::new(path))?;
            if current != *recorded {
                return Err(Error::Config(format!(
                    "input {path} changed since the run: digest {current}, manifest has {recorded}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_known_sha256() {
        // sha256("abc"), a published test vector.
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn verify_inputs_detects_a_changed_file() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.jsonl");
        fs::write(&input, "x").unwrap();
        let mut m = RunManifest::start("train", 7);
        m.add_input(&input).unwrap();
        m.clone().finish(dir.path()).unwrap();
        let loaded = RunManifest::load(dir.path()).unwrap();
        loaded.verify_inputs().unwrap();
        fs::write(&input, "y").unwrap();
        let err = loaded.verify_inputs().err().unwrap().to_string();
        assert!(err.contains("changed since the run"), "{err}");
    }

    #[test]
    fn manifest_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::start("synth", 42);
        m.set_config(b"{}");
        m.finish(dir.path()).unwrap();
        let loaded = RunManifest::load(dir.path()).unwrap();
        assert_eq!(loaded.command, "synth");
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.config_digest.as_deref(), Some(sha256_hex(b"{}").as_str()));
        assert!(loaded.finished_unix_ms >= loaded.started_unix_ms);
    }
}
