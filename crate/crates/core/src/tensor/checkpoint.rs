//! Checkpoint files: one line of JSON header, then a little-endian `f64`
//! payload.
//!
//! The header lists every tensor with its name, shape and the byte offsets
//! (relative to the start of the payload) of its value and its two Adam
//! moment buffers. Arbitrary caller metadata rides along under `meta`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParameterSet, Tensor, TensorError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    step: u64,
    payload_bytes: usize,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
    m_offset: usize,
    v_offset: usize,
}

fn ckpt_err(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn to_bytes(params: &ParameterSet, meta: &serde_json::Value) -> Result<Vec<u8>, TensorError> {
    let mut payload: Vec<u8> = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    let put = |xs: &[f64], payload: &mut Vec<u8>| {
        let at = payload.len();
        for x in xs {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        at
    };
    for (name, p) in params.iter() {
        let (m, v) = p.moments();
        let offset = put(p.value.data(), &mut payload);
        let m_offset = put(m, &mut payload);
        let v_offset = put(v, &mut payload);
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
            offset,
            m_offset,
            v_offset,
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        step: params.step(),
        payload_bytes: payload.len(),
        meta: meta.clone(),
        tensors,
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| ckpt_err(e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParameterSet, serde_json::Value), TensorError> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ckpt_err("missing header terminator"))?;
    let header: Header =
        serde_json::from_slice(&bytes[..split]).map_err(|e| ckpt_err(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ckpt_err(format!("unsupported format_version {}", header.format_version)));
    }
    let payload = &bytes[split + 1..];
    if payload.len() != header.payload_bytes {
        return Err(ckpt_err(format!(
            "payload is {} bytes, header promises {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let read = |offset: usize, n: usize, name: &str| -> Result<Vec<f64>, TensorError> {
        let end = offset
            .checked_add(n * 8)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| ckpt_err(format!("tensor '{name}' runs past the payload")))?;
        Ok(payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    };
    let mut params = ParameterSet::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let value = Tensor::new(e.shape.clone(), read(e.offset, n, &e.name)?)?;
        let m = read(e.m_offset, n, &e.name)?;
        let v = read(e.v_offset, n, &e.name)?;
        params.insert_full(e.name, ParameterSet::restore_parts(value, m, v, e.trainable))?;
    }
    params.set_step(header.step);
    Ok((params, header.meta))
}

pub fn save(path: &Path, params: &ParameterSet, meta: &serde_json::Value) -> Result<(), TensorError> {
    let bytes = to_bytes(params, meta)?;
    std::fs::write(path, bytes).map_err(|source| TensorError::Io { path: path.to_path_buf(), source })
}

pub fn load(path: &Path) -> Result<(ParameterSet, serde_json::Value), TensorError> {
    let bytes = std::fs::read(path).map_err(|source| TensorError::Io { path: path.to_path_buf(), source })?;
    from_bytes(&bytes)
}
