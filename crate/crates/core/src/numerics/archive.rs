//! Directory archive of named tensors: `tensors.bin` holds little-endian
//! `f32` values, row-major; `manifest.json` lists `{name, shape, offset}` per
//! tensor plus arbitrary caller metadata.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

use super::params::ParamStore;
use super::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive io: {0}")]
    Io(#[from] io::Error),
    #[error("archive manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("archive corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob file.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Encodes tensors into `(entries, blob)`.
pub fn encode<'a, T: Scalar>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for &v in t.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    (entries, blob)
}

pub fn decode_entry<T: Scalar>(entry: &TensorEntry, blob: &[u8]) -> Result<Tensor<T>, ArchiveError> {
    let n: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + 4 * n;
    let bytes = blob
        .get(start..end)
        .ok_or_else(|| ArchiveError::Corrupt(format!("tensor `{}` runs past end of blob", entry.name)))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(entry.shape.clone(), data).map_err(|e| ArchiveError::Corrupt(e.to_string()))
}

pub fn write_dir<T: Scalar>(dir: &Path, store: &ParamStore<T>, meta: serde_json::Value) -> Result<(), ArchiveError> {
    fs::create_dir_all(dir)?;
    let (tensors, blob) = encode(store.iter().map(|(n, t)| (n.as_str(), t)));
    fs::write(dir.join(BLOB_FILE), blob)?;
    let manifest = Manifest { tensors, meta };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_dir<T: Scalar>(dir: &Path) -> Result<(ParamStore<T>, serde_json::Value), ArchiveError> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        store.insert(e.name.clone(), decode_entry(e, &blob)?);
    }
    Ok((store, manifest.meta))
}
