//! The hit–miss dataset: probe-layer representations labelled by whether the
//! classifier got the sample right.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! b"PLHITMIS" | version: u32 | header_len: u32 | header JSON | payload
//! payload record = source_index: u32 | predicted: u32 | true_label: u32 | hit: u8 | rep: [f32; rep_dim]
//! ```
//!
//! The header carries the record count, payload length and a CRC32 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::data::{write_file, ImageSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PLHITMIS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct HitMissRecord {
    pub rep: Vec<f64>,
    /// Probing label: `true` (1) for hit, `false` (0) for miss.
    pub hit: bool,
    pub source_index: usize,
    pub predicted: usize,
    pub true_label: usize,
}

impl HitMissRecord {
    pub fn label(&self) -> u8 {
        self.hit as u8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HitMissDataset {
    pub name: String,
    pub rep_dim: usize,
    pub records: Vec<HitMissRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    version: u32,
    name: String,
    rep_dim: usize,
    count: usize,
    payload_len: usize,
    crc32: u32,
}

impl HitMissDataset {
    pub fn new(name: impl Into<String>, rep_dim: usize, records: Vec<HitMissRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.rep.len() != rep_dim {
                return Err(Error::shape(
                    format!("rep_dim {rep_dim}"),
                    format!("{} in record {i}", r.rep.len()),
                ));
            }
            if r.hit != (r.predicted == r.true_label) {
                return Err(Error::InvalidConfig(format!(
                    "record {i}: hit flag disagrees with predicted {} vs true {}",
                    r.predicted, r.true_label
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            rep_dim,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn hit_count(&self) -> usize {
        self.records.iter().filter(|r| r.hit).count()
    }

    pub fn miss_count(&self) -> usize {
        self.len() - self.hit_count()
    }

    /// `#hit / #miss`; `f64::INFINITY` when there are no misses.
    pub fn imbalance_ratio(&self) -> f64 {
        let miss = self.miss_count();
        if miss == 0 {
            f64::INFINITY
        } else {
            self.hit_count() as f64 / miss as f64
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let record_len = 13 + 4 * self.rep_dim;
        let mut payload = Vec::with_capacity(self.len() * record_len);
        for r in &self.records {
            for v in [r.source_index, r.predicted, r.true_label] {
                let v = u32::try_from(v)
                    .map_err(|_| Error::InvalidConfig(format!("index {v} does not fit u32")))?;
                payload.extend_from_slice(&v.to_le_bytes());
            }
            payload.push(r.hit as u8);
            for &x in &r.rep {
                payload.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let header = FileHeader {
            version: FORMAT_VERSION,
            name: self.name.clone(),
            rep_dim: self.rep_dim,
            count: self.len(),
            payload_len: payload.len(),
            crc32: crc32fast::hash(&payload),
        };
        let json = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(16 + json.len() + payload.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&payload);
        write_file(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing hit-miss magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let header_bytes = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| corrupt("header runs past end of file".into()))?;
        let header: FileHeader =
            serde_json::from_slice(header_bytes).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.version != version {
            return Err(corrupt("header version disagrees with preamble".into()));
        }
        let payload = &bytes[16 + hlen..];
        let record_len = 13 + 4 * header.rep_dim;
        if payload.len() != header.payload_len || header.payload_len != header.count * record_len {
            return Err(corrupt(format!(
                "payload is {} bytes; header declares {} ({} records of {record_len})",
                payload.len(),
                header.payload_len,
                header.count
            )));
        }
        if crc32fast::hash(payload) != header.crc32 {
            return Err(corrupt("payload checksum mismatch".into()));
        }
        let u32_at = |rec: &[u8], off: usize| u32::from_le_bytes(rec[off..off + 4].try_into().expect("4 bytes")) as usize;
        let records = payload
            .chunks_exact(record_len)
            .map(|rec| HitMissRecord {
                source_index: u32_at(rec, 0),
                predicted: u32_at(rec, 4),
                true_label: u32_at(rec, 8),
                hit: rec[12] != 0,
                rep: rec[13..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            })
            .collect();
        HitMissDataset::new(header.name, header.rep_dim, records).map_err(|e| corrupt(e.to_string()))
    }
}

/// One record per sample, in dataset order. Representations are rounded to
/// `f32` so that a saved and reloaded dataset is identical to the built one.
pub fn build_hitmiss(classifier: &Classifier, dataset: &ImageSet) -> Result<HitMissDataset> {
    let preds = classifier.predict_set(dataset)?;
    let records = preds
        .into_iter()
        .zip(&dataset.samples)
        .enumerate()
        .map(|(i, (p, s))| HitMissRecord {
            hit: p.predicted == s.label,
            rep: p.rep.iter().map(|&v| v as f32 as f64).collect(),
            source_index: i,
            predicted: p.predicted,
            true_label: s.label,
        })
        .collect();
    HitMissDataset::new(dataset.name.clone(), classifier.rep_dim(), records)
}
