//! Checkpoint files: a JSON header followed by little-endian `f32` tensors.
//!
//! ```text
//! b"PLCKPT01" | header_len: u32 LE | header JSON | payload (f32 LE, header order)
//! ```

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::write_file;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PLCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub module_kind: String,
    pub shapes: Vec<TensorEntry>,
    pub seed: u64,
    pub training_config: serde_json::Value,
    /// Whatever the module needs to rebuild its structure before loading tensors.
    pub arch: serde_json::Value,
    #[serde(default)]
    pub metrics: serde_json::Value,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::shape(format!("tensor {name}"), "missing"))
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    module_kind: &str,
    seed: u64,
    training_config: serde_json::Value,
    arch: serde_json::Value,
    metrics: serde_json::Value,
    tensors: &[(String, &ArrayD<f64>)],
) -> Result<()> {
    let header = CheckpointHeader {
        module_kind: module_kind.to_string(),
        shapes: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        seed,
        training_config,
        arch,
        metrics,
    };
    let json = serde_json::to_vec(&header)?;
    let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut bytes = Vec::with_capacity(12 + json.len() + 4 * total);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in tensors {
        for &v in t.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_file(path.as_ref(), &bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes.get(12..12 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
    let mut offset = 12 + hlen;
    let mut tensors = Vec::with_capacity(header.shapes.len());
    for entry in &header.shapes {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| corrupt(&format!("payload ends inside tensor {}", entry.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push((
            entry.name.clone(),
            ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("sized payload"),
        ));
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok(Checkpoint { header, tensors })
}

/// Rounds every value through `f32`, matching what a checkpoint round trip yields.
pub fn quantize_f32(t: &mut ArrayD<f64>) {
    t.mapv_inplace(|v| v as f32 as f64);
}
