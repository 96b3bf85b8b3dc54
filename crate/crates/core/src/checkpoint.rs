//! Checkpoint format shared repo-wide: a directory holding `manifest.json`
//! (entry name, shape, dtype, byte offset into the blob) plus a raw
//! little-endian binary blob. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmath::ParamStore;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "data.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub byte_offset: u64,
    pub byte_len: u64,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Free-form metadata (training config, hashes of inputs, flags).
    pub meta: serde_json::Value,
}

/// Tensor payloads keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

impl Tensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            Tensor::F64(_) => Dtype::F64,
            Tensor::F32(_) => Dtype::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Tensor::F64(v) => v.len(),
            Tensor::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f64(&self) -> Vec<f64> {
        match self {
            Tensor::F64(v) => v.clone(),
            Tensor::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// Ordered name -> (shape, tensor) map; BTreeMap keeps manifests canonical.
pub type TensorSet = BTreeMap<String, (Vec<usize>, Tensor)>;

pub fn save_tensors(dir: impl AsRef<Path>, tensors: &TensorSet, meta: serde_json::Value) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, (shape, tensor)) in tensors {
        let numel: usize = shape.iter().product();
        if numel != tensor.len() {
            return Err(Error::Checkpoint(format!(
                "entry `{name}`: shape {shape:?} vs {} values",
                tensor.len()
            )));
        }
        let byte_offset = blob.len() as u64;
        match tensor {
            Tensor::F64(v) => {
                for x in v {
                    blob.extend_from_slice(&x.to_le_bytes());
                }
            }
            Tensor::F32(v) => {
                for x in v {
                    blob.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: tensor.dtype(),
            byte_offset,
            byte_len: blob.len() as u64 - byte_offset,
            file: BLOB_FILE.to_string(),
        });
    }
    let manifest = Manifest { entries, meta };
    let blob_path = dir.join(BLOB_FILE);
    let mut f = fs::File::create(&blob_path).map_err(|e| Error::io(blob_path.display().to_string(), e))?;
    f.write_all(&blob).map_err(|e| Error::io(blob_path.display().to_string(), e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(())
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_tensors(dir: impl AsRef<Path>) -> Result<(TensorSet, serde_json::Value)> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut out = TensorSet::new();
    for e in &manifest.entries {
        let blob = match blobs.get(&e.file) {
            Some(b) => b,
            None => {
                let path = dir.join(&e.file);
                let bytes = fs::read(&path).map_err(|err| Error::io(path.display().to_string(), err))?;
                blobs.entry(e.file.clone()).or_insert(bytes)
            }
        };
        let start = e.byte_offset as usize;
        let end = start + e.byte_len as usize;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("entry `{}` overruns blob", e.name)));
        }
        let raw = &blob[start..end];
        let tensor = match e.dtype {
            Dtype::F64 => Tensor::F64(
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            Dtype::F32 => Tensor::F32(
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        let numel: usize = e.shape.iter().product();
        if numel != tensor.len() {
            return Err(Error::Checkpoint(format!("entry `{}`: bad byte length", e.name)));
        }
        out.insert(e.name.clone(), (e.shape.clone(), tensor));
    }
    Ok((out, manifest.meta))
}

/// Save a whole parameter store; per-entry lr and frozen flags ride in meta.
pub fn save_store(dir: impl AsRef<Path>, store: &ParamStore, mut meta: serde_json::Value) -> Result<()> {
    let mut tensors = TensorSet::new();
    let mut entry_meta = serde_json::Map::new();
    for (_, e) in store.iter() {
        tensors.insert(e.name.clone(), (e.shape.clone(), Tensor::F64(e.values.clone())));
        entry_meta.insert(
            e.name.clone(),
            serde_json::json!({ "lr": e.lr, "frozen": e.frozen }),
        );
    }
    if !meta.is_object() {
        meta = serde_json::json!({});
    }
    meta.as_object_mut()
        .unwrap()
        .insert("entry_meta".to_string(), serde_json::Value::Object(entry_meta));
    save_tensors(dir, &tensors, meta)
}

/// Load a parameter store saved by [`save_store`].
pub fn load_store(dir: impl AsRef<Path>) -> Result<(ParamStore, serde_json::Value)> {
    let (tensors, meta) = load_tensors(dir)?;
    let mut store = ParamStore::new();
    let entry_meta = meta.get("entry_meta").cloned().unwrap_or(serde_json::json!({}));
    for (name, (shape, tensor)) in tensors {
        let values = match tensor {
            Tensor::F64(v) => v,
            Tensor::F32(_) => {
                return Err(Error::Checkpoint(format!("store entry `{name}` is not f64")))
            }
        };
        let em = entry_meta.get(&name);
        let lr = em.and_then(|m| m.get("lr")).and_then(|v| v.as_f64()).unwrap_or(1e-3);
        let frozen = em.and_then(|m| m.get("frozen")).and_then(|v| v.as_bool()).unwrap_or(false);
        let id = store.register(name, shape, values, lr)?;
        store.set_frozen(id, frozen);
    }
    Ok((store, meta))
}

/// Content hash of a checkpoint directory: sha256 over the manifest bytes
/// and every blob it references, in manifest order.
pub fn checkpoint_hash(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_bytes =
        fs::read(&manifest_path).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    let mut hasher = Sha256::new();
    hasher.update(&manifest_bytes);
    let mut seen = std::collections::BTreeSet::new();
    for e in &manifest.entries {
        if seen.insert(e.file.clone()) {
            let path = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(|err| Error::io(path.display().to_string(), err))?;
            hasher.update(&bytes);
        }
    }
    Ok(hex_string(&hasher.finalize()))
}

/// Sha256 of arbitrary bytes, hex-encoded. Used for run manifests.
pub fn content_hash(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
