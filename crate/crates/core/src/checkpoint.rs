//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `GEOLCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! raw little-endian `f32` blobs the header's tensor table points into.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::Param;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GEOLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// AdamW moment estimates, one array per parameter in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved configuration echo.
    pub config: serde_json::Value,
    /// Number of completed epochs.
    pub epoch: u64,
    /// Number of completed optimizer steps.
    pub step: u64,
    pub seed: u64,
    pub params: Vec<Param<f32>>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    epoch: u64,
    step: u64,
    seed: u64,
    params: Vec<TensorEntry>,
    optimizer_step: Option<u64>,
    first_moment: Vec<TensorEntry>,
    second_moment: Vec<TensorEntry>,
}

fn push_blob(blob: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) -> TensorEntry {
    let offset = blob.len() as u64;
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    TensorEntry {
        name: name.to_string(),
        shape: shape.to_vec(),
        offset,
        len: values.len() as u64,
    }
}

fn read_blob(blob: &[u8], e: &TensorEntry) -> Result<Vec<f32>> {
    let start = e.offset as usize;
    let end = start + 4 * e.len as usize;
    let bytes = blob
        .get(start..end)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {} out of bounds", e.name)))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let params = self
            .params
            .iter()
            .map(|p| push_blob(&mut blob, &p.name, &p.shape, &p.value))
            .collect();
        let (mut first, mut second, mut opt_step) = (Vec::new(), Vec::new(), None);
        if let Some(opt) = &self.optimizer {
            opt_step = Some(opt.step);
            for (p, (m, v)) in self.params.iter().zip(opt.first_moment.iter().zip(&opt.second_moment)) {
                first.push(push_blob(&mut blob, &p.name, &p.shape, m));
                second.push(push_blob(&mut blob, &p.name, &p.shape, v));
            }
        }
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            seed: self.seed,
            params,
            optimizer_step: opt_step,
            first_moment: first,
            second_moment: second,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_bytes = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(header_bytes)?;
        let blob = &bytes[20 + hlen..];
        let params = header
            .params
            .iter()
            .map(|e| {
                Ok(Param {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    value: read_blob(blob, e)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let optimizer = match header.optimizer_step {
            Some(step) => Some(OptimizerState {
                step,
                first_moment: header
                    .first_moment
                    .iter()
                    .map(|e| read_blob(blob, e))
                    .collect::<Result<_>>()?,
                second_moment: header
                    .second_moment
                    .iter()
                    .map(|e| read_blob(blob, e))
                    .collect::<Result<_>>()?,
            }),
            None => None,
        };
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            seed: header.seed,
            params,
            optimizer,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&bytes))
            .and_then(|_| std::fs::rename(&tmp, path))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
