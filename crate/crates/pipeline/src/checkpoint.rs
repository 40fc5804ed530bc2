//! Shared checkpoint format: one JSON manifest plus one float32 binary blob.
//!
//! Every module's parameters live in a single name-keyed store (denoiser and
//! reference twin under `unet.`/`refnet.`, the audio-to-motion model under
//! `a2m.`, the frozen frame autoencoder under `autoenc.`), so one format
//! covers them all. Arrays are serialized sorted by name as little-endian
//! f32, which makes checkpoints byte-identical across reruns; the manifest
//! records shapes, offsets, and a SHA-256 of the blob for integrity.

use std::path::{Path, PathBuf};

use facetalk_core::autodiff::nn::ParamStore;
use facetalk_core::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub version: u32,
    pub stage: u32,
    pub step: u64,
    /// Seed of the parameter store; missing parameters re-initialize from it
    /// exactly as they would have during training.
    pub store_seed: u64,
    pub config_hash: String,
    pub bin_sha256: String,
    pub arrays: Vec<ArrayEntry>,
}

fn json_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

fn bin_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `store` to `<base>.json` + `<base>.bin`.
pub fn save_checkpoint(
    base: &Path,
    stage: u32,
    step: u64,
    store_seed: u64,
    config_hash: &str,
    store: &ParamStore,
) -> Result<()> {
    if let Some(parent) = base.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut arrays = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    // ParamStore iterates its BTreeMap, so this order is already by name.
    for (name, value) in store.iter() {
        let (rows, cols) = value.dim();
        arrays.push(ArrayEntry { name: name.clone(), rows, cols, offset });
        for v in value.iter() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        offset += rows * cols;
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        stage,
        step,
        store_seed,
        config_hash: config_hash.to_string(),
        bin_sha256: sha256_hex(&blob),
        arrays,
    };
    std::fs::write(bin_path(base), &blob)?;
    std::fs::write(json_path(base), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Read `<base>.json` + `<base>.bin` back into a parameter store.
pub fn load_checkpoint(base: &Path) -> Result<(CheckpointManifest, ParamStore)> {
    let manifest_text = std::fs::read_to_string(json_path(base)).map_err(|e| {
        Error::Checkpoint(format!("missing checkpoint {}: {e}", json_path(base).display()))
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Checkpoint(format!("malformed manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let blob = std::fs::read(bin_path(base)).map_err(|e| {
        Error::Checkpoint(format!("missing blob {}: {e}", bin_path(base).display()))
    })?;
    if sha256_hex(&blob) != manifest.bin_sha256 {
        return Err(Error::Checkpoint("parameter blob does not match its digest".into()));
    }
    let mut store = ParamStore::new(manifest.store_seed);
    for entry in &manifest.arrays {
        let n = entry.rows * entry.cols;
        let start = entry.offset * 4;
        let end = start + n * 4;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "array {} overruns the blob ({} > {})",
                entry.name,
                end,
                blob.len()
            )));
        }
        let mut values = Vec::with_capacity(n);
        for chunk in blob[start..end].chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64);
        }
        let arr = Array2::from_shape_vec((entry.rows, entry.cols), values)
            .map_err(|e| Error::Checkpoint(format!("array {}: {e}", entry.name)))?;
        store.set(&entry.name, arr);
    }
    Ok((manifest, store))
}
