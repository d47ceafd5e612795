//! Checkpoint files: one JSON header line naming every tensor, then the
//! raw little-endian `f32` payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT: &str = "lexlm-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload that follows the header line.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(store: &ParamStore, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, p) in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += 4 * p.value.numel();
    }
    let header = Header {
        format: FORMAT.into(),
        metadata,
        tensors,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(offset);
    for (_, p) in store.iter() {
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", header.format)));
    }
    let payload = &bytes[nl + 1..];
    let mut store = ParamStore::new();
    let mut expected_end = 0;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * n;
        if entry.offset != expected_end || end > payload.len() {
            return Err(Error::Checkpoint(format!("bad extent for tensor {}", entry.name)));
        }
        let data = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        expected_end = end;
    }
    if expected_end != payload.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((store, header.metadata))
}

pub fn save(path: &Path, store: &ParamStore, metadata: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(store, metadata)?;
    std::fs::write(path, bytes).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
