//! Checkpoint file: a JSON index header followed by a flat little-endian
//! f32 payload of named tensors.
//!
//! Layout: magic `HSPT`, u32 version, u64 JSON length, JSON bytes, then the
//! f32 data. The JSON carries the step counter, arbitrary config metadata,
//! and a name → {offset (in floats), shape} index sorted by name.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ops::HasTensors;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HSPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorIndex {
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    step: u64,
    config: serde_json::Value,
    tensors: BTreeMap<String, TensorIndex>,
}

/// In-memory checkpoint contents; tensor data upcast to f64.
#[derive(Debug)]
pub struct CheckpointData {
    pub step: u64,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

/// Flatten a model's tensors into (name, shape, data) entries under a name
/// prefix ("" for none).
pub fn collect(model: &impl HasTensors, prefix: &str) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    model
        .tensors()
        .into_iter()
        .map(|(name, t)| {
            let full = if prefix.is_empty() {
                name
            } else {
                format!("{prefix}.{name}")
            };
            (full, t.shape(), t.iter().cloned().collect())
        })
        .collect()
}

/// Write a checkpoint. Entries are indexed by name; the payload is stored
/// as f32.
pub fn save(
    path: &Path,
    step: u64,
    config: &serde_json::Value,
    entries: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<()> {
    let mut index = BTreeMap::new();
    // Offsets follow BTreeMap (sorted-name) order for determinism.
    let mut sorted: Vec<&(String, Vec<usize>, Vec<f64>)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut offset = 0u64;
    for (name, shape, data) in &sorted {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "tensor {name}: shape {shape:?} vs {} values",
                data.len()
            )));
        }
        if index
            .insert(
                name.clone(),
                TensorIndex {
                    offset,
                    shape: shape.clone(),
                },
            )
            .is_some()
        {
            return Err(Error::Config(format!("duplicate tensor name {name}")));
        }
        offset += data.len() as u64;
    }
    let header = Header {
        step,
        config: config.clone(),
        tensors: index,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, _, data) in &sorted {
        for v in data.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let file = std::fs::File::open(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse("not a checkpoint file".into()));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let floats: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();

    let mut tensors = BTreeMap::new();
    for (name, ix) in header.tensors {
        let len: usize = ix.shape.iter().product();
        let start = ix.offset as usize;
        let end = start + len;
        if end > floats.len() {
            return Err(Error::Parse(format!(
                "tensor {name} extends past the payload"
            )));
        }
        tensors.insert(name, (ix.shape, floats[start..end].to_vec()));
    }
    Ok(CheckpointData {
        step: header.step,
        config: header.config,
        tensors,
    })
}

/// Copy checkpoint tensors into a model; every model tensor must be present
/// with a matching shape.
pub fn apply(model: &mut impl HasTensors, prefix: &str, data: &CheckpointData) -> Result<()> {
    for (name, mut t) in model.tensors_mut() {
        let full = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}.{name}")
        };
        let (shape, values) = data
            .tensors
            .get(&full)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {full}")))?;
        if values.len() != t.len() {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {full}: checkpoint shape {shape:?} vs model length {}",
                t.len()
            )));
        }
        t.apply_flat(|i, v| *v = values[i]);
    }
    Ok(())
}

/// Round every tensor through f32, matching what a save/load cycle stores.
/// Training saves call this so a resumed run is bit-compatible with the
/// uninterrupted one.
pub fn quantize_to_f32(model: &mut impl HasTensors) {
    for (_, mut t) in model.tensors_mut() {
        t.apply_flat(|_, v| *v = *v as f32 as f64);
    }
}
