//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (config, free-form metadata, tensor manifest), then every tensor's
//! `f32` values little-endian, back to back.

use super::{ModelConfig, ModelError};
use crate::diffcore::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MOLSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn corrupt(path: &Path, message: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R, path: &Path) -> Result<Checkpoint, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io(path))?;
        if &magic != MAGIC {
            return Err(corrupt(path, "not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io(path))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(corrupt(
                path,
                format!("unsupported format version {version}"),
            ));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io(path))?;
        let len = u64::from_le_bytes(len);
        let mut json =
            vec![0u8; usize::try_from(len).map_err(|_| corrupt(path, "header too large"))?];
        r.read_exact(&mut json).map_err(io(path))?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| corrupt(path, e.to_string()))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(io(path))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * numel;
            let bytes = payload
                .get(start..end)
                .ok_or_else(|| corrupt(path, format!("payload truncated at {}", e.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| corrupt(path, err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Checkpoint {
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let tmp = path.with_extension("ckpt.tmp");
        let file = File::create(&tmp).map_err(io(&tmp))?;
        self.write_to(BufWriter::new(file)).map_err(io(&tmp))?;
        fs::rename(&tmp, path).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, ModelError> {
        let file = File::open(path).map_err(io(path))?;
        Self::read_from(BufReader::new(file), path)
    }
}
