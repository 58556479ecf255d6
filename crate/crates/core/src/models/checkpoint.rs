//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MMKITCKP" | version: u32 | header_len: u64 | header: JSON
//! | payload: f32 values, tensors back to back | sha256(all preceding bytes): 32 bytes
//! ```
//!
//! The header holds `arch`, `model_type`, the config snapshot (YAML text),
//! free-form `aux` state, and a tensor index of `{name, shape, offset}` where
//! `offset` counts f32 values into the payload. Tensor names are grouped by
//! prefix: `model/` for parameters, `optim/` for optimizer moments.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MMKITCKP";
pub const FORMAT_VERSION: u32 = 1;

pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointBundle {
    pub arch: String,
    pub model_type: String,
    pub config: String,
    pub params: TensorMap,
    pub optimizer: TensorMap,
    /// Scheduler, RNG, runner and step state.
    pub aux: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: String,
    model_type: String,
    config: String,
    aux: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

const PARAM_PREFIX: &str = "model/";
const OPTIM_PREFIX: &str = "optim/";

pub fn encode_checkpoint(bundle: &CheckpointBundle) -> Result<Vec<u8>> {
    let mut index = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (prefix, map) in [(PARAM_PREFIX, &bundle.params), (OPTIM_PREFIX, &bundle.optimizer)] {
        for (name, (shape, data)) in map {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Shape(format!("tensor `{name}` data does not match shape {shape:?}")));
            }
            index.push(IndexEntry {
                name: format!("{prefix}{name}"),
                shape: shape.clone(),
                offset,
            });
            offset += data.len();
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        arch: bundle.arch.clone(),
        model_type: bundle.model_type.clone(),
        config: bundle.config.clone(),
        aux: bundle.aux.clone(),
        tensors: index,
    })?;
    let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointBundle> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(corrupt("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if &body[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let payload_start = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length out of range"))?;
    let header: Header =
        serde_json::from_slice(&body[20..payload_start]).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let payload = &body[payload_start..];
    if payload.len() % 4 != 0 {
        return Err(corrupt("payload is not a whole number of f32 values"));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let mut bundle = CheckpointBundle {
        arch: header.arch,
        model_type: header.model_type,
        config: header.config,
        aux: header.aux,
        ..Default::default()
    };
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor `{}` out of payload range", e.name)))?
            .to_vec();
        if let Some(name) = e.name.strip_prefix(PARAM_PREFIX) {
            bundle.params.insert(name.to_string(), (e.shape, data));
        } else if let Some(name) = e.name.strip_prefix(OPTIM_PREFIX) {
            bundle.optimizer.insert(name.to_string(), (e.shape, data));
        } else {
            return Err(Error::CorruptCheckpoint(format!("unknown tensor group in `{}`", e.name)));
        }
    }
    Ok(bundle)
}

/// Writes atomically: a temp file in the same directory is renamed into place.
pub fn save_checkpoint(path: &Path, bundle: &CheckpointBundle) -> Result<()> {
    let bytes = encode_checkpoint(bundle)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|f| f.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    decode_checkpoint(&fs::read(path)?)
}
