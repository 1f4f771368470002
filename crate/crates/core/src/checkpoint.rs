//! Binary checkpoint: `MICSE01\n`, u64 LE header length, JSON header, f64 LE parameter data.
//!
//! Only the online encoder is stored. The header lists every parameter with its
//! shape and offset (in elements) into the data section, so the file can be read
//! without this crate.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::textio::Vocab;

pub const MAGIC: &[u8; 8] = b"MICSE01\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    vocab: Vocab,
    step: usize,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub vocab: Vocab,
    pub step: usize,
    /// Free-form run description (the resolved training config).
    pub meta: serde_json::Value,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_encoder(encoder: &Encoder, vocab: &Vocab, step: usize, meta: serde_json::Value) -> Self {
        Self { encoder: encoder.config().clone(), vocab: vocab.clone(), step, meta, params: encoder.named_values() }
    }

    pub fn to_encoder(&self, trainable: bool) -> Result<Encoder> {
        if self.encoder.vocab_size != self.vocab.len() {
            return Err(Error::Checkpoint(format!(
                "encoder expects {} tokens but vocabulary has {}",
                self.encoder.vocab_size,
                self.vocab.len()
            )));
        }
        Encoder::from_named(self.encoder.clone(), &self.params, trainable)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, shape, values) in &self.params {
            if shape.iter().product::<usize>() != values.len() {
                return Err(Error::Checkpoint(format!("{name}: shape {shape:?} vs {} values", values.len())));
            }
            entries.push(ParamEntry { name: name.clone(), shape: shape.clone(), offset });
            offset += values.len();
        }
        let header = Header {
            encoder: self.encoder.clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            meta: self.meta.clone(),
            params: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, values) in &self.params {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let header_len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header length overflow"))?;
        let data_start = MAGIC.len() + 8 + header_len;
        if bytes.len() < data_start {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[MAGIC.len() + 8..data_start])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let data = &bytes[data_start..];
        let mut params = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let (lo, hi) = (entry.offset * 8, (entry.offset + n) * 8);
            if hi > data.len() {
                return Err(Error::Checkpoint(format!("{}: data truncated", entry.name)));
            }
            let values =
                data[lo..hi].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
            params.push((entry.name, entry.shape, values));
        }
        Ok(Self { encoder: header.encoder, vocab: header.vocab, step: header.step, meta: header.meta, params })
    }

    /// Write atomically: a sibling temp file renamed over `path`, so a crash keeps the old file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
