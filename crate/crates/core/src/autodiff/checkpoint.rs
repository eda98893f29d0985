//! Checkpoint layout: a version line, a one-line JSON manifest (names,
//! shapes, dtype, free-form metadata), then every parameter as little-endian
//! f32 in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ParamStore, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "pobrl-ckpt-v1";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    meta: Value,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub meta: Value,
}

pub fn checkpoint_bytes(store: &ParamStore, meta: &Value) -> Vec<u8> {
    let manifest = Manifest {
        version: CHECKPOINT_VERSION.into(),
        meta: meta.clone(),
        params: store
            .params()
            .iter()
            .map(|p| ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                dtype: "f32".into(),
            })
            .collect(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_VERSION.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(serde_json::to_string(&manifest).expect("manifest serializes").as_bytes());
    out.push(b'\n');
    for p in store.params() {
        for v in p.value.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Writes the checkpoint and returns the SHA-256 of its bytes.
pub fn write_checkpoint(path: impl AsRef<Path>, store: &ParamStore, meta: &Value) -> Result<String> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(store, meta);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(crate::seed::sha256_hex(&bytes))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let first = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| bad("missing version line"))?;
    if &bytes[..first] != CHECKPOINT_VERSION.as_bytes() {
        return Err(bad(&format!(
            "unsupported version tag {:?}",
            String::from_utf8_lossy(&bytes[..first])
        )));
    }
    let rest = &bytes[first + 1..];
    let second = rest.iter().position(|b| *b == b'\n').ok_or_else(|| bad("missing manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&rest[..second]).map_err(|e| bad(&format!("manifest: {e}")))?;
    let mut raw = &rest[second + 1..];
    let mut store = ParamStore::new();
    for entry in manifest.params {
        if entry.dtype != "f32" {
            return Err(bad(&format!("unsupported dtype {}", entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        if raw.len() < 4 * n {
            return Err(bad(&format!("truncated buffer for {}", entry.name)));
        }
        let data = raw[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        raw = &raw[4 * n..];
        store.add(entry.name, Tensor::new(entry.shape, data)?)?;
    }
    if !raw.is_empty() {
        return Err(bad("trailing bytes after last parameter"));
    }
    Ok(Checkpoint {
        store,
        meta: manifest.meta,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
