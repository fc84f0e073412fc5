//! Parameter checkpoints: a JSON manifest plus a little-endian `f64` blob
//! next to it (same stem, `.bin` extension).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{ParamStore, Result, Tensor, TensorError};

const FORMAT: &str = "hero-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
    #[serde(default = "default_true")]
    pub trainable: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    pub entries: Vec<CheckpointEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint(store: &ParamStore, meta: serde_json::Value, manifest_path: &Path) -> Result<()> {
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::with_capacity(store.num_scalars() * 8);
    let mut entries = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let offset = bytes.len() as u64;
        for x in p.value.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(CheckpointEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            length: bytes.len() as u64 - offset,
            trainable: p.trainable,
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries,
        meta,
    };
    fs::write(&blob, &bytes)?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob_file = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let bytes = fs::read(&blob_file)?;
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        if e.dtype != "f64" {
            return Err(TensorError::Checkpoint(format!(
                "`{}`: unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let numel: usize = e.shape.iter().product();
        let (start, len) = (e.offset as usize, e.length as usize);
        if len != numel * 8 || start + len > bytes.len() {
            return Err(TensorError::Checkpoint(format!(
                "`{}`: byte range {start}+{len} inconsistent with shape {:?} / blob of {} bytes",
                e.name,
                e.shape,
                bytes.len()
            )));
        }
        let data = bytes[start..start + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        if e.trainable {
            store.add(e.name.clone(), t);
        } else {
            store.add_frozen(e.name.clone(), t);
        }
    }
    Ok((store, manifest.meta))
}
