//! Shared checkpoint container: a UTF-8 JSON metadata header followed by
//! named little-endian float32 tensors. One format for the codec, the context
//! encoder, task heads, and specialized end-to-end models.
//!
//! Layout: magic `VKPT` | u32 version | u64 meta length | meta JSON |
//! u64 tensor count | per tensor: u32 name length, name, u32 ndim,
//! u64 dims..., f32 data.
//!
//! The metadata records a SHA-256 of the tensor section; loading verifies it,
//! so any consumer of a frozen component notices modified bytes.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::Real;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Component kind: codec | encoder | head | e2e | mean.
    pub kind: String,
    /// Echo of the configuration that produced this checkpoint.
    pub config_echo: String,
    pub param_count: usize,
    /// Final training losses and metrics.
    pub losses: BTreeMap<String, f64>,
    /// SHA-256 over the tensor section.
    pub content_checksum: String,
    /// SHA-256 of the dataset manifest this was trained on.
    pub data_fingerprint: String,
    /// Component-specific fields: task, mode, backbone_checksum, ...
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn new(kind: &str) -> Self {
        CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            config_echo: String::new(),
            param_count: 0,
            losses: BTreeMap::new(),
            content_checksum: String::new(),
            data_fingerprint: String::new(),
            extra: BTreeMap::new(),
        }
    }
}

fn tensor_section(store: &ParamStore<Real>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, entry) in store.iter() {
        let name = entry.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(entry.value.ndim() as u32).to_le_bytes());
        for d in entry.value.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in entry.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(
    store: &ParamStore<Real>,
    mut meta: CheckpointMeta,
    path: &Path,
) -> Result<CheckpointMeta> {
    let tensors = tensor_section(store);
    meta.param_count = store.scalar_count();
    meta.content_checksum = format!("{:x}", Sha256::digest(&tensors));
    let meta_json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + meta_json.len() + tensors.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&tensors);
    std::fs::write(path, out).map_err(|e| Error::dataset(path, e))?;
    Ok(meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<Real>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| {
            Error::Integrity(format!("missing checkpoint {}: {e}", path.display()))
        })?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::dataset(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + meta_len])?;
    let tensors = &bytes[16 + meta_len..];
    let checksum = format!("{:x}", Sha256::digest(tensors));
    if checksum != meta.content_checksum {
        return Err(Error::Integrity(format!(
            "{}: tensor checksum {} does not match recorded {}",
            path.display(),
            checksum,
            meta.content_checksum
        )));
    }

    let mut store = ParamStore::new();
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > tensors.len() {
            return Err(Error::Checkpoint("truncated tensor section".into()));
        }
        let s = &tensors[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let count = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name not UTF-8".into()))?;
        let ndim = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize);
        }
        let len: usize = dims.iter().product();
        let data = take(&mut off, len * 4)?;
        let vals: Vec<Real> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(name, ArrayD::from_shape_vec(IxDyn(&dims), vals).unwrap());
    }
    Ok((store, meta))
}

/// Copy loaded values into a freshly constructed model store, matching by
/// name and shape. Catches architecture/checkpoint drift.
pub fn assign_params(target: &mut ParamStore<Real>, loaded: &ParamStore<Real>) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            target.len(),
            loaded.len()
        )));
    }
    for (_, entry) in loaded.iter() {
        let id = target.id(&entry.name)?;
        if target.get(id).shape() != entry.value.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {}: {:?} vs {:?}",
                entry.name,
                target.get(id).shape(),
                entry.value.shape()
            )));
        }
        target.get_mut(id).assign(&entry.value);
    }
    Ok(())
}

/// Fingerprint of the dataset manifest a run trained on.
pub fn manifest_fingerprint(dataset_dir: &Path) -> Result<String> {
    let path = dataset_dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::dataset(&path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_store() -> ParamStore<Real> {
        let mut s = ParamStore::new();
        s.add("layer.w", ArrayD::from_elem(IxDyn(&[2, 3]), 0.5f32));
        s.add("layer.b", ArrayD::from_elem(IxDyn(&[3]), -1.0f32));
        s
    }

    #[test]
    fn round_trip_preserves_values_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut meta = CheckpointMeta::new("head");
        meta.losses.insert("train_mse".into(), 0.25);
        let saved = save_checkpoint(&toy_store(), meta, &path).unwrap();
        assert_eq!(saved.param_count, 9);
        let (store, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.kind, "head");
        assert_eq!(loaded.content_checksum, saved.content_checksum);
        assert_eq!(store.get(store.id("layer.b").unwrap())[[1]], -1.0);
    }

    #[test]
    fn tampered_bytes_fail_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&toy_store(), CheckpointMeta::new("head"), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Integrity(_)) => {}
            Err(other) => panic!("expected integrity error, got {other:?}"),
            Ok(_) => panic!("tampered checkpoint loaded"),
        }
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&toy_store(), CheckpointMeta::new("head"), &a).unwrap();
        save_checkpoint(&toy_store(), CheckpointMeta::new("head"), &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn assign_params_rejects_shape_drift() {
        let loaded = toy_store();
        let mut target = ParamStore::new();
        target.add("layer.w", ArrayD::from_elem(IxDyn(&[3, 2]), 0.0f32));
        target.add("layer.b", ArrayD::from_elem(IxDyn(&[3]), 0.0f32));
        assert!(assign_params(&mut target, &loaded).is_err());
    }
}
