//! Parameter checkpoints: a JSON manifest naming every tensor plus a raw
//! little-endian `f32` blob holding them back to back in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::write_atomic;
use crate::error::{Error, Result};
use crate::nn::{Params, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub version: u32,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Related artifacts (e.g. the encoder checkpoints a fusion model was trained on).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// Little-endian bytes of every tensor, in walk order.
pub fn params_blob<P: Params<f32>>(params: &P) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t) in params.named_tensors() {
        entries.push(TensorEntry { name, shape: t.shape.clone(), offset });
        offset += t.len();
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (bytes, entries)
}

/// Hex SHA-256 of the parameter blob; identical parameters give identical hashes.
pub fn params_hash<P: Params<f32>>(params: &P) -> String {
    hex::encode(Sha256::digest(params_blob(params).0))
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `<path>` (manifest JSON) and `<path with .bin>` (blob).
pub fn save<P: Params<f32>>(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    config_hash: Option<String>,
    references: Vec<String>,
    params: &P,
) -> Result<CheckpointManifest> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (bytes, tensors) = params_blob(params);
    let bpath = blob_path(path);
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        version: CHECKPOINT_VERSION,
        config,
        config_hash,
        references,
        blob: bpath.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        blob_sha256: hex::encode(Sha256::digest(&bytes)),
        tensors,
    };
    write_atomic(&bpath, &bytes)?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(path, e))?;
    write_atomic(path, &json)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

/// Loads tensors into an already-shaped parameter collection, checking
/// names, shapes and the blob hash.
pub fn load_into<P: Params<f32>>(path: &Path, kind: &str, params: &mut P) -> Result<CheckpointManifest> {
    let manifest = read_manifest(path)?;
    if manifest.kind != kind {
        return Err(Error::CheckpointMismatch(format!("expected a {kind} checkpoint, found {}", manifest.kind)));
    }
    let bpath = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.blob_sha256 {
        return Err(Error::CheckpointMismatch(format!("{} does not match its recorded hash", bpath.display())));
    }
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut targets: Vec<&mut Tensor<f32>> = params.all_tensors_mut();
    if names.len() != manifest.tensors.len() {
        return Err(Error::CheckpointMismatch(format!(
            "model has {} tensors, checkpoint has {}",
            names.len(),
            manifest.tensors.len()
        )));
    }
    for ((name, target), entry) in names.iter().zip(targets.iter_mut()).zip(&manifest.tensors) {
        if *name != entry.name || target.shape != entry.shape {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {} {:?} does not match checkpoint entry {} {:?}",
                name, target.shape, entry.name, entry.shape
            )));
        }
        let end = entry.offset + target.len();
        if end > floats.len() {
            return Err(Error::CheckpointMismatch(format!("tensor {name} runs past the blob")));
        }
        target.data.copy_from_slice(&floats[entry.offset..end]);
    }
    Ok(manifest)
}
