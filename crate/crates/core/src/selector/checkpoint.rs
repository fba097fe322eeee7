//! Selector checkpoints.
//!
//! ```text
//! magic   b"FSELCKPT"
//! version u32 LE
//! hlen    u32 LE, followed by `hlen` bytes of JSON header
//! data    every tensor listed in the header, in order, as f32 LE
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LoraAdapters, SelectorConfig, SelectorParams, Stage};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FSELCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoraHeader {
    rank: usize,
    alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: SelectorConfig,
    seed: u64,
    stage: Option<Stage>,
    lora: Option<LoraHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    /// Last completed training stage, if any.
    pub stage: Option<Stage>,
    pub params: SelectorParams,
    pub adapters: Option<LoraAdapters>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = self.params.tensors();
        if let Some(a) = &self.adapters {
            tensors.extend(a.tensors());
        }
        let header = Header {
            config: self.params.config.clone(),
            seed: self.seed,
            stage: self.stage,
            lora: self.adapters.as_ref().map(|a| LoraHeader {
                rank: a.rank,
                alpha: a.alpha,
            }),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &tensors {
            for &v in t.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt(0, "not a selector checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                expected: format!("checkpoint v{VERSION}"),
                found: format!("checkpoint v{version}"),
            });
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = 16 + hlen;
        if bytes.len() < body {
            return Err(corrupt(16, format!("header needs {hlen} bytes")));
        }
        let header: Header = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| corrupt(16, format!("bad header: {e}")))?;
        header.config.validate()?;

        let mut params = SelectorParams::zeros(&header.config);
        let mut adapters = header
            .lora
            .as_ref()
            .map(|l| LoraAdapters::zeros(&header.config, l.rank.max(1), l.alpha));
        let mut targets = params.tensors_mut();
        if let Some(a) = adapters.as_mut() {
            targets.extend(a.tensors_mut());
        }
        if targets.len() != header.tensors.len() {
            return Err(corrupt(16, format!(
                "header lists {} tensors, model has {}",
                header.tensors.len(),
                targets.len()
            )));
        }
        let mut pos = body;
        for ((name, mut dst), entry) in targets.into_iter().zip(&header.tensors) {
            if name != entry.name || dst.shape() != entry.shape.as_slice() {
                return Err(corrupt(16, format!(
                    "tensor {} {:?} does not match model tensor {name} {:?}",
                    entry.name,
                    entry.shape,
                    dst.shape()
                )));
            }
            let need = dst.len() * 4;
            if bytes.len() - pos < need {
                return Err(corrupt(pos, format!("truncated tensor {name}")));
            }
            for (v, chunk) in dst.iter_mut().zip(bytes[pos..pos + need].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
            }
            pos += need;
        }
        if pos != bytes.len() {
            return Err(corrupt(pos, "trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint {
            seed: header.seed,
            stage: header.stage,
            params,
            adapters,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex_digest(&self.to_bytes()?))
    }

    /// Rounds every tensor to f32 precision, matching a save/load cycle.
    pub fn quantize(&mut self) {
        let mut all = self.params.tensors_mut();
        if let Some(a) = self.adapters.as_mut() {
            all.extend(a.tensors_mut());
        }
        for (_, mut t) in all {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
