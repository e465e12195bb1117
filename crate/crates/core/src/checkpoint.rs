//! Portable checkpoints: `<name>.manifest.json` plus `<name>.blob`.
//!
//! The blob is the concatenation of every parameter as little-endian `f32`,
//! in manifest order. Each manifest entry records the byte offset, length and
//! CRC-32 of its slice, so a damaged blob is caught on load.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use glean_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{GleanError, Result};
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
    pub crc32: u32,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// What produced the checkpoint, e.g. `"bank"` or `"glean"`.
    pub kind: String,
    pub blob: String,
    pub config: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

/// In-memory checkpoint: a config snapshot plus named parameters.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamStore,
}

/// Resolve `path` (with or without a `.manifest.json` / `.blob` suffix) into
/// the manifest and blob paths.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".manifest.json")
        .or_else(|| s.strip_suffix(".blob"))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{stem}.manifest.json")), PathBuf::from(format!("{stem}.blob")))
}

fn ckpt_err(msg: impl Into<String>) -> GleanError {
    GleanError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: serde_json::Value, params: ParamStore) -> Self {
        Self { kind: kind.into(), config, params }
    }

    /// Serialise into manifest and blob byte buffers.
    pub fn encode(&self, blob_name: &str) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.params.len());
        for (id, name, tensor) in self.params.iter() {
            let offset = blob.len() as u64;
            for v in tensor.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            let slice = &blob[offset as usize..];
            entries.push(ManifestEntry {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                bytes: slice.len() as u64,
                crc32: crc32fast::hash(slice),
                trainable: self.params.is_trainable(id),
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            blob: blob_name.to_string(),
            config: self.config.clone(),
            params: entries,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        Ok((json, blob))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (manifest_path, blob_path) = checkpoint_paths(path);
        if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let blob_name = blob_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let (json, blob) = self.encode(&blob_name)?;
        fs::write(&blob_path, blob)?;
        fs::write(&manifest_path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest_path, _) = checkpoint_paths(path);
        let text = fs::read(&manifest_path)
            .map_err(|e| ckpt_err(format!("cannot read {}: {e}", manifest_path.display())))?;
        let manifest: Manifest =
            serde_json::from_slice(&text).map_err(|e| ckpt_err(format!("corrupt manifest: {e}")))?;
        let blob_path = manifest_path.with_file_name(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| ckpt_err(format!("missing blob {}: {e}", blob_path.display())))?;
        Self::decode(manifest, &blob)
    }

    pub fn decode(manifest: Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(ckpt_err(format!("unsupported format version {}", manifest.format_version)));
        }
        let mut seen = HashSet::new();
        let mut params = ParamStore::new();
        for e in &manifest.params {
            if !seen.insert(e.name.as_str()) {
                return Err(ckpt_err(format!("parameter {} listed twice", e.name)));
            }
            if e.dtype != "f32" {
                return Err(ckpt_err(format!("parameter {} has dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.bytes != numel as u64 * 4 {
                return Err(ckpt_err(format!("parameter {}: shape {:?} vs {} bytes", e.name, e.shape, e.bytes)));
            }
            let (start, end) = (e.offset as usize, (e.offset + e.bytes) as usize);
            let slice = blob
                .get(start..end)
                .ok_or_else(|| ckpt_err(format!("parameter {} lies outside the blob", e.name)))?;
            if crc32fast::hash(slice) != e.crc32 {
                return Err(ckpt_err(format!("checksum mismatch for parameter {}", e.name)));
            }
            let data = slice.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let id = params.add(e.name.clone(), Tensor::new(&e.shape, data)?);
            params.set_trainable(id, e.trainable);
        }
        Ok(Self { kind: manifest.kind, config: manifest.config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.25 - 0.3));
        let b = store.add("a.bias", Tensor::new(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        store.set_trainable(b, false);
        Checkpoint::new("test", serde_json::json!({"x": 1e-4, "y": [1, 2]}), store)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert!(back.params.bitwise_eq(&ck.params, ""));
        assert_eq!(back.config, ck.config);
        assert!(!back.params.is_trainable(back.params.id("a.bias").unwrap()));
        let names: Vec<_> = back.params.iter().map(|(_, n, _)| n.to_string()).collect();
        assert_eq!(names, ["a.weight", "a.bias"]);
    }

    #[test]
    fn flipped_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        sample().save(&path).unwrap();
        let (_, blob) = checkpoint_paths(&path);
        let mut bytes = fs::read(&blob).unwrap();
        bytes[5] ^= 0x40;
        fs::write(&blob, bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn duplicate_and_missing_entries_fail() {
        let ck = sample();
        let (json, blob) = ck.encode("x.blob").unwrap();
        let mut manifest: Manifest = serde_json::from_slice(&json).unwrap();
        manifest.params.push(manifest.params[0].clone());
        assert!(Checkpoint::decode(manifest, &blob).is_err());
        let manifest: Manifest = serde_json::from_slice(&json).unwrap();
        assert!(Checkpoint::decode(manifest, &blob[..4]).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(Checkpoint::load(&dir.path().join("nothing")).is_err());
    }

    #[test]
    fn suffixes_resolve_to_the_same_pair() {
        let a = checkpoint_paths(Path::new("out/model"));
        assert_eq!(a, checkpoint_paths(Path::new("out/model.manifest.json")));
        assert_eq!(a, checkpoint_paths(Path::new("out/model.blob")));
    }
}
