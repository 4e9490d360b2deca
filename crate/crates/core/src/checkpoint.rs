//! Single-file checkpoints.
//!
//! Layout:
//!
//! ```text
//! b"ISFLCKPT"                 8 bytes
//! manifest length (u64 LE)    8 bytes
//! manifest                    UTF-8 JSON
//! payload                     f64 little-endian values, parameters in manifest order
//! ```
//!
//! The manifest records the format version, the model config, every
//! parameter's name, shape and element offset into the payload, and the
//! preprocessing state needed to evaluate on raw data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::data::{SplitConfig, StandardizerStats, Vocabulary};
use crate::error::{Error, Result};
use crate::experiment::DataSource;
use crate::models::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ISFLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    pub offset: usize,
}

/// Everything besides the weights that evaluation needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub vocabulary: Vocabulary,
    pub standardizer: StandardizerStats,
    pub split: SplitConfig,
    pub data: DataSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub preprocessing: Preprocessing,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub preprocessing: Preprocessing,
}

pub fn to_bytes(model: &Model, preprocessing: &Preprocessing) -> Result<Vec<u8>> {
    let mut params = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for p in model.params.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.numel();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        params,
        preprocessing: preprocessing.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |what: &str| Error::Checkpoint(what.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let manifest_end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let payload = &bytes[manifest_end..];
    if !payload.len().is_multiple_of(8) {
        return Err(corrupt("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::new();
    let mut expected_offset = 0;
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        if entry.offset != expected_offset || entry.offset + numel > values.len() {
            return Err(Error::Checkpoint(format!(
                "parameter {} lies outside the payload",
                entry.name
            )));
        }
        let data = values[entry.offset..entry.offset + numel].to_vec();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        expected_offset += numel;
    }
    if expected_offset != values.len() {
        return Err(corrupt("payload has trailing values"));
    }
    Ok(Checkpoint {
        model: Model::from_params(manifest.model, store)?,
        preprocessing: manifest.preprocessing,
    })
}

pub fn save(path: &Path, model: &Model, preprocessing: &Preprocessing) -> Result<()> {
    std::fs::write(path, to_bytes(model, preprocessing)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}
