//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "XVIT" | version: u32 | header_len: u64 | header JSON | SHA-256(header JSON)
//! | zero padding to a 64-byte boundary | payloads
//! ```
//!
//! The header holds the model config and, per tensor in canonical order, its
//! name, shape, element type and byte offset relative to the start of the
//! payload section. Every payload starts on a 64-byte boundary of the file and
//! stores raw little-endian elements. The header also carries the SHA-256 of
//! the payload section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{shapes_for, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::{DType, Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XVIT";
pub const CHECKPOINT_VERSION: u32 = 1;
const ALIGN: usize = 64;
const FIXED: usize = 4 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
    payload_sha256: String,
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint<T: Element>(mp: &ModelParams<Tensor<T>>, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    mp.check_shapes(cfg)?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in mp.named() {
        payload.resize(align_up(payload.len()), 0);
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            offset: payload.len(),
        });
        for &x in t.data() {
            x.write_le(&mut payload);
        }
    }
    let header = Header {
        config: cfg.clone(),
        tensors,
        payload_bytes: payload.len(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(FIXED + json.len() + DIGEST + ALIGN + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&Sha256::digest(&json));
    out.resize(align_up(out.len()), 0);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

/// Loads a checkpoint and the config stored in it.
pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams<Tensor<T>>)> {
    let bytes = fs::read(path)?;
    let header = read_header(&bytes)?;
    let params = decode(&bytes, &header, &header.config)?;
    Ok((header.config, params))
}

/// The config and element type stored in a checkpoint, without decoding
/// tensors.
pub fn checkpoint_info(path: impl AsRef<Path>) -> Result<(ModelConfig, DType)> {
    let bytes = fs::read(path)?;
    let header = read_header(&bytes)?;
    let dtype = header.tensors.first().map_or(DType::F64, |t| t.dtype);
    Ok((header.config, dtype))
}

/// Loads a checkpoint, requiring its tensors to fit `cfg`.
pub fn load_checkpoint_for<T: Element>(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<ModelParams<Tensor<T>>> {
    let bytes = fs::read(path)?;
    let header = read_header(&bytes)?;
    decode(&bytes, &header, cfg)
}

fn read_header(bytes: &[u8]) -> Result<Header> {
    let err = |reason: String| Error::checkpoint("<header>", reason);
    if bytes.len() < FIXED {
        return Err(err(format!("file is {} bytes, shorter than the fixed prefix", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(err(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(err(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| err(format!("header length {len} too large")))?;
    let end = FIXED
        .checked_add(len)
        .and_then(|e| e.checked_add(DIGEST))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| err(format!("header length {len} runs past end of file")))?;
    let json = &bytes[FIXED..FIXED + len];
    if Sha256::digest(json)[..] != bytes[FIXED + len..end] {
        return Err(err("header checksum mismatch".into()));
    }
    serde_json::from_slice(json).map_err(|e| err(format!("malformed header: {e}")))
}

fn decode<T: Element>(bytes: &[u8], header: &Header, cfg: &ModelConfig) -> Result<ModelParams<Tensor<T>>> {
    let start = align_up(FIXED + serde_json::to_vec(header)?.len() + DIGEST);
    let payload = bytes
        .get(start..)
        .filter(|p| p.len() == header.payload_bytes)
        .ok_or_else(|| {
            Error::checkpoint(
                "<payload>",
                format!(
                    "expected {} payload bytes, file holds {}",
                    header.payload_bytes,
                    bytes.len().saturating_sub(start)
                ),
            )
        })?;
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::checkpoint("<payload>", "payload checksum mismatch"));
    }

    let expected = shapes_for(cfg)?;
    let mut entries = header.tensors.iter();
    let mut failure: Option<Error> = None;
    let params = expected.map_leaves("", &mut |name, shape| {
        let placeholder = || Tensor::zeros(shape.clone());
        if failure.is_some() {
            return placeholder();
        }
        match read_tensor(payload, entries.next(), name, shape) {
            Ok(t) => t,
            Err(e) => {
                failure = Some(e);
                placeholder()
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = entries.next() {
        return Err(Error::checkpoint(&extra.name, "unexpected tensor for this config"));
    }
    Ok(params)
}

fn read_tensor<T: Element>(payload: &[u8], entry: Option<&TensorEntry>, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let entry = entry.ok_or_else(|| Error::checkpoint(name, "missing from checkpoint"))?;
    if entry.name != name {
        return Err(Error::checkpoint(name, format!("found {:?} in its place", entry.name)));
    }
    if entry.shape != shape {
        return Err(Error::checkpoint(
            name,
            format!("shape mismatch: checkpoint has {:?}, config expects {shape:?}", entry.shape),
        ));
    }
    if entry.dtype != T::DTYPE {
        return Err(Error::checkpoint(
            name,
            format!("element type {} cannot be loaded as {}", entry.dtype, T::DTYPE),
        ));
    }
    let size = T::DTYPE.size();
    let n: usize = shape.iter().product();
    let raw = payload
        .get(entry.offset..entry.offset + n * size)
        .ok_or_else(|| Error::checkpoint(name, "payload out of bounds"))?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_vec(shape.to_vec(), data)
}
