//! Binary checkpoint format.
//!
//! ```text
//! offset 0   magic  b"NCAPCKPT"
//! offset 8   u32 LE header length H
//! offset 12  H bytes of UTF-8 JSON header
//! offset 12+H  blob: little-endian f32 tensor data
//! ```
//!
//! The header holds `format_version`, `hyperparameters`, `vocabulary` and a
//! `tensors` directory mapping each parameter name to its shape and its byte
//! range inside the blob. Parameters live in memory as f64 and are stored as
//! f32, so a loaded model re-saves to identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CaptionModel, ModelConfig};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"NCAPCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = MAGIC.len() + 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub hyperparameters: ModelConfig,
    pub vocabulary: Vocabulary,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// A model together with the identifier derived from its serialized bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCheckpoint {
    pub model: CaptionModel,
    pub model_id: String,
}

/// First 16 hex digits of the SHA-256 of the checkpoint bytes.
pub fn model_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_bytes(model: &CaptionModel) -> Vec<u8> {
    let mut blob = Vec::with_capacity(model.params.num_values() * 4);
    let mut tensors = BTreeMap::new();
    model.params.for_each(|name, t| {
        let offset = blob.len() as u64;
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        tensors.insert(
            name.to_string(),
            TensorEntry {
                shape: t.shape().to_vec(),
                byte_offset: offset,
                byte_length: blob.len() as u64 - offset,
            },
        );
    });
    let header = Header {
        format_version: FORMAT_VERSION,
        hyperparameters: model.config.clone(),
        vocabulary: model.vocab.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

fn format_err(position: usize, message: impl Into<String>) -> Error {
    Error::Format {
        message: message.into(),
        position: position as u64,
    }
}

/// Byte offset of a 1-based (line, column) position in `text`.
fn byte_position(text: &[u8], line: usize, column: usize) -> usize {
    let mut current = 1;
    let mut start = 0;
    for (i, &b) in text.iter().enumerate() {
        if current == line {
            break;
        }
        if b == b'\n' {
            current += 1;
            start = i + 1;
        }
    }
    (start + column.saturating_sub(1)).min(text.len())
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < PREAMBLE {
        return Err(format_err(bytes.len(), "file too short for a checkpoint preamble"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err(0, "not a checkpoint (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = PREAMBLE + len;
    if end > bytes.len() {
        return Err(format_err(bytes.len(), format!("header of {len} bytes is truncated")));
    }
    let json = &bytes[PREAMBLE..end];
    let value: serde_json::Value = serde_json::from_slice(json)
        .map_err(|e| format_err(PREAMBLE + byte_position(json, e.line(), e.column()), format!("corrupt header: {e}")))?;
    match value.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(format_err(PREAMBLE, format!("unsupported format version {v} (expected {FORMAT_VERSION})")));
        }
        None => return Err(format_err(PREAMBLE, "header lacks format_version")),
    }
    let header: Header =
        serde_json::from_value(value).map_err(|e| format_err(PREAMBLE, format!("corrupt header: {e}")))?;
    Ok((header, end))
}

pub fn from_bytes(bytes: &[u8]) -> Result<CaptionModel> {
    let (header, blob_start) = parse_header(bytes)?;
    let blob = &bytes[blob_start..];
    let mut model = CaptionModel::init(header.hyperparameters.clone(), header.vocabulary.clone(), 0)
        .map_err(|e| format_err(PREAMBLE, format!("invalid hyperparameters: {e}")))?;

    let expected = model.params.names();
    if expected.len() != header.tensors.len() || expected.iter().any(|n| !header.tensors.contains_key(n)) {
        return Err(format_err(
            PREAMBLE,
            format!(
                "tensor directory does not match the architecture: expected {:?}, found {:?}",
                expected,
                header.tensors.keys().collect::<Vec<_>>()
            ),
        ));
    }
    let mut ranges: Vec<(u64, u64)> = header.tensors.values().map(|e| (e.byte_offset, e.byte_length)).collect();
    ranges.sort_unstable();
    let mut cursor = 0u64;
    for &(offset, length) in &ranges {
        if offset != cursor {
            return Err(format_err(blob_start + offset as usize, "tensor ranges overlap or leave gaps"));
        }
        cursor = offset + length;
    }
    if cursor as usize > blob.len() {
        return Err(format_err(bytes.len(), format!("blob truncated: need {cursor} bytes, found {}", blob.len())));
    }
    if (cursor as usize) < blob.len() {
        return Err(format_err(blob_start + cursor as usize, "trailing bytes after the last tensor"));
    }

    let mut failure = None;
    model.params.for_each_mut(|name, t| {
        if failure.is_some() {
            return;
        }
        let entry = &header.tensors[name];
        let count = t.len();
        if entry.shape != t.shape() || entry.byte_length != 4 * count as u64 {
            failure = Some(format_err(
                PREAMBLE,
                format!("tensor {name}: stored shape {:?} does not fit expected {:?}", entry.shape, t.shape()),
            ));
            return;
        }
        let start = entry.byte_offset as usize;
        let data: Vec<f64> = blob[start..start + 4 * count]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        *t = Tensor::new(entry.shape.clone(), data).expect("shape checked");
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

/// Write `model` to `path` and return its model id.
pub fn save_checkpoint(model: &CaptionModel, path: &Path) -> Result<String> {
    let bytes = to_bytes(model);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(model_id(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(LoadedCheckpoint {
        model: from_bytes(&bytes)?,
        model_id: model_id(&bytes),
    })
}
