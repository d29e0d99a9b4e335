use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{ActivationSnapshot, VocabLayout};

use super::{ModelConfig, ParamStore};

const MAGIC: &[u8; 4] = b"UGCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub layout: VocabLayout,
    pub step: u64,
    pub stage: String,
    pub activation: Option<ActivationSnapshot>,
    /// Present when AdamW moments follow the parameters.
    pub optimizer_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerMoments {
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

/// Model state on disk: `UGCK`, header length (u32), JSON header, every
/// parameter tensor in declaration order as little-endian f32, optional
/// first and second moments in the same order, then a CRC-32 of all
/// preceding bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub stage: String,
    pub activation: Option<ActivationSnapshot>,
    pub params: ParamStore<f32>,
    pub moments: Option<OptimizerMoments>,
}

fn push_tensors(buf: &mut Vec<u8>, p: &ParamStore<f32>) {
    for t in p.tensors() {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn take_tensors(body: &mut &[u8], p: &mut ParamStore<f32>) -> Result<()> {
    for t in p.tensors_mut() {
        let n = t.len() * 4;
        if body.len() < n {
            return Err(Error::Corrupt("checkpoint truncated inside tensor data".into()));
        }
        let (head, rest) = body.split_at(n);
        for (dst, b) in t.iter_mut().zip(head.chunks_exact(4)) {
            *dst = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
        *body = rest;
    }
    Ok(())
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            config: *self.params.config(),
            layout: *self.params.layout(),
            step: self.step,
            stage: self.stage.clone(),
            activation: self.activation,
            optimizer_step: self.moments.as_ref().map(|m| m.step),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut buf = Vec::with_capacity(8 + header.len() + self.params.num_params() * 12 + 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        push_tensors(&mut buf, &self.params);
        if let Some(m) = &self.moments {
            if !m.m.same_shape(&self.params) || !m.v.same_shape(&self.params) {
                return Err(Error::invalid("optimizer moments do not match the parameters"));
            }
            push_tensors(&mut buf, &m.m);
            push_tensors(&mut buf, &m.v);
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let (content, crc) = bytes.split_at(bytes.len() - 4);
        let want = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
        if crc32fast::hash(content) != want {
            return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
        }
        let hlen = u32::from_le_bytes(content[4..8].try_into().expect("4 bytes")) as usize;
        if content.len() < 8 + hlen {
            return Err(Error::Corrupt("checkpoint header truncated".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&content[8..8 + hlen])?;
        let mut body = &content[8 + hlen..];
        let mut params = ParamStore::zeros(header.config, header.layout)?;
        take_tensors(&mut body, &mut params)?;
        let moments = match header.optimizer_step {
            Some(step) => {
                let mut m = params.zeros_like();
                let mut v = params.zeros_like();
                take_tensors(&mut body, &mut m)?;
                take_tensors(&mut body, &mut v)?;
                Some(OptimizerMoments { step, m, v })
            }
            None => None,
        };
        if !body.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes after tensor data", body.len())));
        }
        Ok(Self {
            step: header.step,
            stage: header.stage,
            activation: header.activation,
            params,
            moments,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Writes through a temporary sibling and renames, so an interrupted
    /// save never clobbers an earlier checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
