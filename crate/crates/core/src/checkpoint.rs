//! `MMR1` checkpoint files.
//!
//! Layout: the four bytes `MMR1`, a little-endian `u32` header length, a JSON
//! header, then every tensor as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::moe::RouterState;
use crate::tensor::Float;

pub const MAGIC: &[u8; 4] = b"MMR1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        4 * self.numel() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    pub routers: Vec<RouterState>,
}

impl Header {
    /// Offsets must start at zero and tile the payload without gaps.
    pub fn validate(&self, payload_len: u64) -> Result<()> {
        let mut expected = 0u64;
        for t in &self.tensors {
            if t.offset != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor {} at offset {} but expected {expected}",
                    t.name, t.offset
                )));
            }
            expected += t.byte_len();
        }
        if expected != payload_len {
            return Err(Error::Checkpoint(format!(
                "manifest covers {expected} bytes but payload has {payload_len}"
            )));
        }
        Ok(())
    }
}

/// Serialises a model; values are stored as `f32` whatever the compute width.
pub fn to_bytes<T: Float>(model: &Model<T>, step: u64) -> Result<Vec<u8>> {
    let params = model.named_parameters();
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, t) in &params {
        let entry = TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        };
        offset += entry.byte_len();
        tensors.push(entry);
    }
    let header = Header {
        config: model.config().clone(),
        step,
        tensors,
        routers: model.routers().to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &params {
        for v in t.data().iter() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits a checkpoint into its header and payload, checking the framing.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic: not an MMR1 checkpoint".into()));
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if body.len() < header_len {
        return Err(Error::Checkpoint(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    let payload = &body[header_len..];
    header.validate(payload.len() as u64)?;
    Ok((header, payload))
}

/// Rebuilds a model and returns it with the saved step.
pub fn from_bytes<T: Float>(bytes: &[u8]) -> Result<(Model<T>, u64)> {
    let (header, payload) = read_header(bytes)?;
    let mut model = Model::<T>::new(header.config.clone())?;
    let params = model.named_parameters();
    if params.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            params.len()
        )));
    }
    for ((name, tensor), entry) in params.iter().zip(&header.tensors) {
        if *name != entry.name || tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "manifest entry {} {:?} does not match {name} {:?}",
                entry.name,
                entry.shape,
                tensor.shape()
            )));
        }
        let start = entry.offset as usize;
        let values: Vec<T> = payload[start..start + entry.byte_len() as usize]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        tensor.set_data(&values)?;
    }
    model.set_routers(header.routers)?;
    Ok((model, header.step))
}

pub fn save<T: Float>(model: &Model<T>, step: u64, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model, step)?)?;
    Ok(())
}

pub fn load<T: Float>(path: impl AsRef<Path>) -> Result<(Model<T>, u64)> {
    from_bytes(&fs::read(path)?)
}
