//! Binary checkpoints.
//!
//! Layout (little-endian): `"ECKP"`, `u32` format version, `u32` header
//! length, UTF-8 JSON header, `u32` array count, then per array: `u32` name
//! length, name bytes, `u32` rank, `u32` per dimension, `f64` payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, LmConfig};
use crate::model::{AsrModel, Topology};
use crate::tensor::ParamStore;

const MAGIC: &[u8; 4] = b"ECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    Asr { topology: Topology },
    Lm { config: LmConfig },
}

/// Training bookkeeping stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub stage: String,
    pub epoch: usize,
    pub seed: u64,
    pub valid_accuracy: Option<f64>,
    pub valid_perplexity: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelKind,
    pub vocab_hash: String,
    pub vocab: String,
    pub meta: TrainMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: ParamStore,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + self.params.num_values() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| bad(format!("header: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| bad("parameter name is not UTF-8"))?.to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("array too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.insert(&name, shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after last array"));
        }
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn vocabulary(&self) -> Result<Vocabulary> {
        let v = Vocabulary::parse(&self.header.vocab)?;
        if v.hash() != self.header.vocab_hash {
            return Err(bad("vocabulary hash mismatch"));
        }
        Ok(v)
    }

    pub fn from_asr(model: &AsrModel, meta: TrainMeta) -> Self {
        Checkpoint {
            header: Header {
                model: ModelKind::Asr {
                    topology: model.topology.clone(),
                },
                vocab_hash: model.vocab.hash(),
                vocab: model.vocab.to_file_string(),
                meta,
            },
            params: model.params.clone(),
        }
    }

    pub fn from_lm(lm: &LanguageModel, meta: TrainMeta) -> Self {
        Checkpoint {
            header: Header {
                model: ModelKind::Lm { config: lm.config.clone() },
                vocab_hash: lm.vocab.hash(),
                vocab: lm.vocab.to_file_string(),
                meta,
            },
            params: lm.params.clone(),
        }
    }

    pub fn into_asr(self) -> Result<AsrModel> {
        let vocab = self.vocabulary()?;
        match self.header.model {
            ModelKind::Asr { topology } => AsrModel::from_parts(topology, vocab, self.params),
            ModelKind::Lm { .. } => Err(bad("expected an acoustic model checkpoint, found a language model")),
        }
    }

    pub fn into_lm(self) -> Result<LanguageModel> {
        let vocab = self.vocabulary()?;
        match self.header.model {
            ModelKind::Lm { config } => LanguageModel::from_params(vocab, config, self.params),
            ModelKind::Asr { .. } => Err(bad("expected a language model checkpoint, found an acoustic model")),
        }
    }
}
