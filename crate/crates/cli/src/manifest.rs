//! Run manifests and content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Command-line arguments after the program name.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    /// Output file names relative to `out`, with their content hashes.
    pub outputs: BTreeMap<String, String>,
    pub dataset_hashes: BTreeMap<String, String>,
    pub duration_s: Option<f64>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config: serde_json::Value, out: &Path) -> Self {
        Self {
            command: command.into(),
            args,
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            out: out.to_path_buf(),
            outputs: BTreeMap::new(),
            dataset_hashes: BTreeMap::new(),
            duration_s: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Records the hashes of `names` inside `dir`.
    pub fn record_outputs(&mut self, dir: &Path, names: &[String]) -> Result<(), CliError> {
        for name in names {
            self.outputs.insert(name.clone(), hash_file(&dir.join(name))?);
        }
        Ok(())
    }
}

/// Git-style blob hash (`blob <len>\0` prefix) with SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(blob_hash(&bytes))
}

/// Hashes of the dataset files present in `dir`.
pub fn dataset_hashes(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for name in hero_core::synth::DATASET_FILES {
        let path = dir.join(name);
        if path.exists() {
            out.insert(name.to_string(), hash_file(&path)?);
        }
    }
    Ok(out)
}
