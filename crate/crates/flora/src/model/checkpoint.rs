//! Checkpoint format: a small binary container with a JSON header and raw
//! little-endian tensor payloads.
//!
//! Layout:
//!
//! ```text
//! magic   b"FLRA"
//! version u32 LE (currently 1)
//! hlen    u32 LE, byte length of the JSON header
//! header  JSON: format version, model config, tensor directory
//! payload concatenated little-endian element bytes
//! ```
//!
//! Adapters are stored as separate named partitions, never pre-merged into
//! the base weights. Parsing is strict: unknown header fields, bad offsets,
//! shape/size mismatches, duplicate names, and truncated payloads are all
//! rejected. [`parse_checkpoint`] must never panic on arbitrary input.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::TransformerModel;
use crate::tensor::{DType, Element, Tensor};

const MAGIC: &[u8; 4] = b"FLRA";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: u64,
    cols: u64,
    dtype: DType,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// A structurally validated checkpoint, not yet bound to an element type.
pub struct ParsedCheckpoint {
    pub config: ModelConfig,
    pub dtype: DType,
    tensors: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl ParsedCheckpoint {
    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    /// Materializes the tensors at the requested precision.
    pub fn into_tensors<E: Element>(self) -> Result<BTreeMap<String, Tensor<E>>> {
        if self.dtype != E::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors but {} was requested; pass --precision {}",
                self.dtype,
                E::DTYPE,
                self.dtype
            )));
        }
        let mut map = BTreeMap::new();
        for entry in &self.tensors {
            let start = entry.offset as usize;
            let end = start + entry.byte_len as usize;
            let t = Tensor::<E>::from_le_bytes(
                entry.rows as usize,
                entry.cols as usize,
                &self.payload[start..end],
            )?;
            map.insert(entry.name.clone(), t);
        }
        Ok(map)
    }
}

/// Serializes a model to checkpoint bytes.
pub fn checkpoint_bytes<E: Element>(model: &TransformerModel<E>) -> Result<Vec<u8>> {
    let tensors = model.all_tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in &tensors {
        let bytes = t.le_bytes();
        entries.push(TensorEntry {
            name: name.clone(),
            rows: t.rows() as u64,
            cols: t.cols() as u64,
            dtype: E::DTYPE,
            offset: payload.len() as u64,
            byte_len: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint<E: Element>(model: &TransformerModel<E>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses and validates checkpoint bytes. Total work and allocation are
/// bounded by the input size; malformed input yields an error, never a
/// panic.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<ParsedCheckpoint> {
    if bytes.len() < 12 {
        return Err(bad("truncated container (needs magic, version, header length)"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic; not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rest = &bytes[12..];
    if hlen > rest.len() {
        return Err(bad(format!(
            "header length {hlen} exceeds remaining {} bytes",
            rest.len()
        )));
    }
    let header: Header =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| bad(format!("header json: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "header format_version {} disagrees with container",
            header.format_version
        )));
    }
    header.config.validate().map_err(|e| bad(format!("embedded config: {e}")))?;
    let payload = &rest[hlen..];

    if header.tensors.is_empty() {
        return Err(bad("empty tensor directory"));
    }
    let dtype = header.tensors[0].dtype;
    let mut seen = std::collections::BTreeSet::new();
    for entry in &header.tensors {
        if entry.dtype != dtype {
            return Err(bad(format!("tensor {:?} mixes dtypes", entry.name)));
        }
        if !seen.insert(entry.name.as_str()) {
            return Err(bad(format!("duplicate tensor {:?}", entry.name)));
        }
        if entry.rows == 0 || entry.cols == 0 {
            return Err(bad(format!("tensor {:?} has a zero dimension", entry.name)));
        }
        let elems = entry
            .rows
            .checked_mul(entry.cols)
            .ok_or_else(|| bad(format!("tensor {:?} element count overflow", entry.name)))?;
        let expect_bytes = elems
            .checked_mul(dtype.size_bytes() as u64)
            .ok_or_else(|| bad(format!("tensor {:?} byte size overflow", entry.name)))?;
        if expect_bytes != entry.byte_len {
            return Err(bad(format!(
                "tensor {:?}: directory byte_len {} does not match {}x{} {}",
                entry.name, entry.byte_len, entry.rows, entry.cols, dtype
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.byte_len)
            .ok_or_else(|| bad(format!("tensor {:?} offset overflow", entry.name)))?;
        if end > payload.len() as u64 {
            return Err(bad(format!(
                "tensor {:?} extends to byte {end}, past payload of {} bytes",
                entry.name,
                payload.len()
            )));
        }
    }

    Ok(ParsedCheckpoint {
        config: header.config,
        dtype,
        tensors: header.tensors,
        payload: payload.to_vec(),
    })
}

/// Loads a model at a specific element precision.
pub fn load_model<E: Element>(path: &Path) -> Result<TransformerModel<E>> {
    let bytes = std::fs::read(path)?;
    let parsed = parse_checkpoint(&bytes)?;
    let config = parsed.config.clone();
    let tensors = parsed.into_tensors::<E>()?;
    TransformerModel::from_tensors(config, tensors)
}

/// Reads just the config and precision, so callers can dispatch.
pub fn peek(path: &Path) -> Result<(ModelConfig, DType)> {
    let bytes = std::fs::read(path)?;
    let parsed = parse_checkpoint(&bytes)?;
    Ok((parsed.config, parsed.dtype))
}
