//! Parameter checkpoints: a flat little-endian f64 blob plus a JSON manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub total_bytes: usize,
    pub params: Vec<ManifestEntry>,
}

pub fn encode_params(params: &ParamSet) -> (Vec<u8>, CheckpointManifest) {
    let mut blob = Vec::with_capacity(params.num_scalars() * 8);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: blob.len() - offset,
        });
    }
    let manifest = CheckpointManifest {
        format: "f64-le".into(),
        total_bytes: blob.len(),
        params: entries,
    };
    (blob, manifest)
}

/// Writes `<stem>.bin` and `<stem>.json` under `dir`.
pub fn save_checkpoint(params: &ParamSet, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (blob, manifest) = encode_params(params);
    fs::write(dir.join(format!("{stem}.bin")), blob)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

pub fn decode_params(blob: &[u8], manifest: &CheckpointManifest) -> Result<ParamSet> {
    if manifest.total_bytes != blob.len() {
        return Err(Error::Format(format!(
            "checkpoint blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.total_bytes
        )));
    }
    let mut ps = ParamSet::new();
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        if e.len != n * 8 || e.offset + e.len > blob.len() {
            return Err(Error::Format(format!("bad manifest entry {}", e.name)));
        }
        let data = blob[e.offset..e.offset + e.len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        ps.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(ps)
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<ParamSet> {
    let blob = fs::read(dir.join(format!("{stem}.bin")))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    decode_params(&blob, &manifest)
}

/// Copies values from `src` into `dst`, requiring identical names and shapes.
pub fn restore_into(dst: &mut ParamSet, src: &ParamSet) -> Result<()> {
    if dst.names() != src.names() {
        return Err(Error::Format("checkpoint parameter names differ from model".into()));
    }
    for (k, t) in src.tensors().iter().enumerate() {
        let id = super::ParamId(k);
        if dst.get(id).shape() != t.shape() {
            return Err(Error::Format(format!(
                "checkpoint shape mismatch for {}",
                src.name(id)
            )));
        }
        *dst.get_mut(id) = t.clone();
    }
    Ok(())
}
