//! Binary checkpoint: `GAIT` magic, u32 LE version, u64 LE header length,
//! JSON header, then f32 LE payloads in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainError};
use crate::autodiff::Tensor;
use crate::embedder::{EmbedderConfig, EmbedderParams};

pub const MAGIC: &[u8; 4] = b"GAIT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: EmbedderConfig,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::CheckpointIo {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes parameters and optimizer moments to bytes.
pub fn encode_checkpoint(params: &EmbedderParams<f32>, state: &AdamState<f32>) -> Result<Vec<u8>, TrainError> {
    if state.m.len() != params.tensors.len() || state.v.len() != params.tensors.len() {
        return Err(TrainError::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    let mut entries = Vec::new();
    let mut payload: Vec<&Tensor<f32>> = Vec::new();
    let mut offset = 0u64;
    let groups = [("", params.tensors.iter().map(|(_, t)| t).collect::<Vec<_>>()), (M_PREFIX, state.m.iter().collect()), (V_PREFIX, state.v.iter().collect())];
    for (prefix, tensors) in groups {
        for ((name, _), t) in params.tensors.iter().zip(tensors) {
            entries.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len() as u64;
            payload.push(t);
        }
    }
    let header = serde_json::to_vec(&Header {
        config: params.config.clone(),
        adam_step: state.step,
        tensors: entries,
    })
    .map_err(|e| TrainError::FormatError(e.to_string()))?;

    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in payload {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(EmbedderParams<f32>, AdamState<f32>), TrainError> {
    if bytes.len() < PREAMBLE {
        return Err(if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            TrainError::FormatError("bad magic bytes".into())
        } else {
            TrainError::CorruptPayload(format!("file of {} bytes is shorter than the preamble", bytes.len()))
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(TrainError::FormatError("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(TrainError::FormatError(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| TrainError::CorruptPayload(format!("header length {header_len} exceeds file")))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| TrainError::FormatError(format!("header: {e}")))?;
    let payload = &bytes[header_end..];

    let mut expected = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        if entry.offset != expected {
            return Err(TrainError::CorruptPayload(format!("tensor {} at offset {}, expected {expected}", entry.name, entry.offset)));
        }
        let len: usize = entry.shape.iter().product();
        let end = expected + 4 * len as u64;
        if end > payload.len() as u64 {
            return Err(TrainError::CorruptPayload(format!(
                "tensor {} needs {end} payload bytes, file has {}",
                entry.name,
                payload.len()
            )));
        }
        let data = payload[expected as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(entry.shape, data).map_err(|e| TrainError::FormatError(e.to_string()))?;
        tensors.push((entry.name, t));
        expected = end;
    }
    if expected != payload.len() as u64 {
        return Err(TrainError::CorruptPayload(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - expected
        )));
    }

    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix(M_PREFIX) {
            m.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix(V_PREFIX) {
            v.push((rest.to_string(), t));
        } else {
            params.push((name, t));
        }
    }
    let names = |xs: &[(String, Tensor<f32>)]| xs.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    if names(&m) != names(&params) || names(&v) != names(&params) {
        return Err(TrainError::FormatError("optimizer moments do not match parameters".into()));
    }
    let params = EmbedderParams::new(header.config, params).map_err(|e| TrainError::FormatError(e.to_string()))?;
    let state = AdamState {
        m: m.into_iter().map(|(_, t)| t).collect(),
        v: v.into_iter().map(|(_, t)| t).collect(),
        step: header.adam_step,
    };
    Ok((params, state))
}

pub fn save_checkpoint(params: &EmbedderParams<f32>, state: &AdamState<f32>, path: &Path) -> Result<(), TrainError> {
    let bytes = encode_checkpoint(params, state)?;
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))?;
    f.flush().map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(EmbedderParams<f32>, AdamState<f32>), TrainError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_checkpoint(&bytes)
}
