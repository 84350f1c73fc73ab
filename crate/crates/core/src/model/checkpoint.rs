//! Binary checkpoint container: magic, length-prefixed JSON header, then
//! little-endian `f32` parameter data in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Param};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vocab::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRAJLM01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub seed: u64,
    /// Free-form provenance (training step, library version, ...).
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    config_hash: String,
    vocab: Vocabulary,
    vocab_hash: String,
    seed: u64,
    meta: BTreeMap<String, String>,
    params: Vec<ManifestEntry>,
}

impl Checkpoint {
    pub fn new(model: Model, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if !model.config.matches_vocab(&vocab) {
            return Err(Error::Checkpoint(format!(
                "model expects {} tokens over {} modalities but vocabulary has {} over {}",
                model.config.vocab_size,
                model.config.n_modalities,
                vocab.total_tokens,
                vocab.n_modalities()
            )));
        }
        Ok(Self {
            model,
            vocab,
            seed,
            meta: BTreeMap::new(),
        })
    }

    pub fn config_hash(&self) -> String {
        self.model.config.hash()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let params = self
            .model
            .params
            .iter()
            .map(|p| {
                let e = ManifestEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape.clone(),
                    offset,
                };
                offset += 4 * p.tensor.len();
                e
            })
            .collect();
        let header = Header {
            config: self.model.config.clone(),
            config_hash: self.config_hash(),
            vocab: self.vocab.clone(),
            vocab_hash: self.vocab.hash(),
            seed: self.seed,
            meta: self.meta.clone(),
            params,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json("serializing checkpoint header", e))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.model.params {
            for &v in &p.tensor.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing TRAJLM01 magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(header_len)
            .filter(|&s| s <= bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..data_start]).map_err(|e| Error::json("parsing checkpoint header", e))?;
        let mut vocab = header.vocab;
        for (i, m) in vocab.modalities.iter_mut().enumerate() {
            m.id = i;
        }
        if vocab.hash() != header.vocab_hash {
            return Err(Error::Checkpoint("embedded vocabulary does not match its recorded hash".into()));
        }
        if header.config.hash() != header.config_hash {
            return Err(Error::Checkpoint("config does not match its recorded hash".into()));
        }
        let data = &bytes[data_start..];
        let expected: usize = header.params.iter().map(|p| 4 * p.shape.iter().product::<usize>()).sum();
        if data.len() != expected {
            return Err(Error::Checkpoint(format!(
                "parameter data is {} bytes but the manifest describes {expected}",
                data.len()
            )));
        }
        let mut params = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let end = entry.offset + 4 * n;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("parameter `{}` runs past the data section", entry.name)));
            }
            let values = data[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            params.push(Param {
                name: entry.name,
                tensor: Tensor::new(entry.shape, values)?,
            });
        }
        let model = Model::from_params(header.config, params)?;
        let mut ckpt = Checkpoint::new(model, vocab, header.seed)?;
        ckpt.meta = header.meta;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Loads and rejects the checkpoint unless its vocabulary hash equals
    /// `vocab`'s.
    pub fn load_with_vocab(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let (have, want) = (ckpt.vocab.hash(), vocab.hash());
        if have != want {
            return Err(Error::Checkpoint(format!(
                "{}: vocabulary hash mismatch (checkpoint {}, supplied {})",
                path.display(),
                &have[..12],
                &want[..12]
            )));
        }
        Ok(ckpt)
    }
}
