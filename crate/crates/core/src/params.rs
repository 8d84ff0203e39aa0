//! Named parameter storage and the checkpoint archive format.
//!
//! A checkpoint is a single file:
//!
//! ```text
//! b"GACKPT01" | u64 LE header length | JSON header | f64 LE payload
//! ```
//!
//! The header carries the manifest (arbitrary JSON supplied by the caller) and
//! an index of `{name, shape, offset}` entries into the payload. Arrays are
//! written in ascending name order so the archive bytes are a pure function of
//! the stored values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GaitError, Result};

const MAGIC: &[u8; 8] = b"GACKPT01";

/// An ordered map from stable parameter names to arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    arrays: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.arrays.get_mut(name)
    }

    /// Like [`get`](Self::get) but reports a missing name as an error.
    pub fn require(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.arrays
            .get(name)
            .ok_or_else(|| GaitError::invalid(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<f64>> {
        self.arrays.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    /// SHA-256 over names, shapes, and the exact bit patterns of all values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, a) in &self.arrays {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in a.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in a.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    manifest: serde_json::Value,
    arrays: Vec<IndexEntry>,
}

/// Writes `params` and `manifest` as one archive file.
pub fn write_archive(path: &Path, manifest: &serde_json::Value, params: &ParamStore) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0usize;
    for (name, a) in params.iter() {
        entries.push(IndexEntry { name: name.to_string(), shape: a.shape().to_vec(), offset });
        offset += a.len();
    }
    let header = Header { manifest: manifest.clone(), arrays: entries };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| GaitError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut buf = Vec::with_capacity(16 + header_bytes.len() + offset * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, a) in params.iter() {
        for v in a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // written beside the target and renamed so readers never see a torn file
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| GaitError::io(&tmp, e))?;
    file.write_all(&buf).map_err(|e| GaitError::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| GaitError::io(path, e))?;
    Ok(())
}

/// Reads an archive written by [`write_archive`].
pub fn read_archive(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let bad = |reason: &str| GaitError::Checkpoint { path: path.to_path_buf(), reason: reason.to_string() };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| GaitError::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16 + hlen;
    if bytes.len() < body {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(&e.to_string()))?;
    let payload = &bytes[body..];
    let mut params = ParamStore::new();
    for entry in header.arrays {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset * 8;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(bad(&format!("array `{}` exceeds payload", entry.name)));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let a = ArrayD::from_shape_vec(IxDyn(&entry.shape), data).map_err(|e| bad(&e.to_string()))?;
        params.insert(entry.name, a);
    }
    Ok((header.manifest, params))
}
