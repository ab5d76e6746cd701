//! Binary checkpoint: 8-byte magic, little-endian `u32` version, little-endian
//! `u64` header length, a JSON header, then raw little-endian `f64` blobs at
//! the element offsets the header lists.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::diffcore::{AdamSlot, Optimizer, OptimizerKind, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::worldgen::Benchmark;

const MAGIC: &[u8; 8] = b"TAMLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

/// Complete training state. Streams are keyed by seed and iteration, so
/// the iteration counter doubles as the RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub benchmark: Benchmark,
    pub iteration: u64,
    pub params: ParamSet,
    pub optimizer: Optimizer,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    path: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct SlotEntry {
    path: String,
    step: u64,
    len: u64,
    m_offset: u64,
    v_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    engine: String,
    config: TrainConfig,
    benchmark: Benchmark,
    iteration: u64,
    optimizer: OptimizerKind,
    params: Vec<ParamEntry>,
    adam: Vec<SlotEntry>,
    /// Total `f64` elements in the blob section.
    blob_len: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob: Vec<f64> = Vec::new();
        let mut params = Vec::new();
        for (path, t) in self.params.iter() {
            params.push(ParamEntry {
                path: path.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
            });
            blob.extend_from_slice(t.data());
        }
        let mut adam = Vec::new();
        for (path, slot) in self.optimizer.slots() {
            let m_offset = blob.len() as u64;
            blob.extend_from_slice(&slot.m);
            let v_offset = blob.len() as u64;
            blob.extend_from_slice(&slot.v);
            adam.push(SlotEntry {
                path: path.clone(),
                step: slot.step,
                len: slot.m.len() as u64,
                m_offset,
                v_offset,
            });
        }
        let header = Header {
            engine: crate::ENGINE_VERSION.to_string(),
            config: self.config.clone(),
            benchmark: self.benchmark.clone(),
            iteration: self.iteration,
            optimizer: self.optimizer.kind(),
            params,
            adam,
            blob_len: blob.len() as u64,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + blob.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(Error::Truncated(format!("{} bytes, shorter than the magic", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < PREAMBLE {
            return Err(Error::Truncated("preamble cut short".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Truncated(format!("header of {header_len} bytes does not fit")))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])?;
        let body = &bytes[header_end..];
        let expected = header.blob_len.checked_mul(8).unwrap_or(u64::MAX);
        if (body.len() as u64) < expected {
            return Err(Error::Truncated(format!(
                "{} blob bytes, header promises {expected}",
                body.len()
            )));
        }
        if body.len() as u64 != expected {
            return Err(Error::Contract(format!(
                "{} trailing bytes after the blobs",
                body.len() as u64 - expected
            )));
        }
        let blob: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let slice = |offset: u64, len: usize| -> Result<Vec<f64>> {
            let start = offset as usize;
            blob.get(start..start + len)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::Contract(format!("blob range {start}+{len} out of bounds")))
        };

        let mut params = ParamSet::new();
        for e in &header.params {
            let n = e.shape.iter().product();
            params.insert(e.path.clone(), Tensor::new(e.shape.clone(), slice(e.offset, n)?)?)?;
        }
        let mut optimizer = Optimizer::new(header.optimizer);
        for s in header.adam {
            let len = s.len as usize;
            let slot = AdamSlot {
                step: s.step,
                m: slice(s.m_offset, len)?,
                v: slice(s.v_offset, len)?,
            };
            optimizer.restore_slot(s.path, slot);
        }
        Ok(Checkpoint {
            config: header.config,
            benchmark: header.benchmark,
            iteration: header.iteration,
            params,
            optimizer,
        })
    }
}

/// Writes through a sibling temporary file so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
