//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `SDDCKPT1`, a little-endian `u64` manifest
//! length, the manifest as canonical (key-sorted) JSON, then every tensor as
//! little-endian `f32` in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::graph::{GraphSpec, ModelGraph};
use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SDDCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    graph: GraphSpec,
    tensors: Vec<TensorEntry>,
    optimizer_state: bool,
    metadata: Value,
}

/// Serializes a graph and free-form metadata.
pub fn to_bytes<T: Scalar>(graph: &ModelGraph<T>, metadata: &Value) -> Result<Vec<u8>> {
    let state = graph.state();
    let manifest = Manifest {
        graph: graph.spec().clone(),
        tensors: state
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        optimizer_state: false,
        metadata: metadata.clone(),
    };
    // Round-tripping through `Value` sorts every object's keys.
    let json = serde_json::to_vec(&serde_json::to_value(&manifest)?)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * graph.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in state.values() {
        for &v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Inverse of [`to_bytes`].
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(ModelGraph<T>, Value)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing SDDCKPT1 header".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::Checkpoint("manifest truncated".into()))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let mut graph = ModelGraph::<T>::new(manifest.graph, 0)?;
    let mut cursor = 16 + len;
    let mut state = BTreeMap::new();
    for entry in manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let blob = bytes
            .get(cursor..cursor + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{}' truncated", entry.name)))?;
        cursor += 4 * n;
        let data = blob
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        state.insert(entry.name, Tensor::from_vec(&entry.shape, data)?);
    }
    if cursor != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cursor)));
    }
    graph.load_state(&state)?;
    Ok((graph, manifest.metadata))
}

pub fn save<T: Scalar>(path: &Path, graph: &ModelGraph<T>, metadata: &Value) -> Result<()> {
    let bytes = to_bytes(graph, metadata)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ModelGraph<T>, Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
