//! Binary checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "ATRC" | version | meta_len | meta (UTF-8 JSON) | tensor_count |
//!   { name_len | name | ndim | dims... | f32 data... } * tensor_count
//! ```
//!
//! Values are always stored as 32-bit floats.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq2seq::{ModelConfig, Seq2SeqModel};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ATRC";
pub const VERSION: u32 = 1;

/// Position of a training run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    /// Zero-based epoch currently being trained.
    pub epoch: usize,
    /// Optimizer steps taken so far (including skipped ones).
    pub step: u64,
    /// Batches of the current epoch already consumed.
    pub step_in_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub src_vocab: Vec<String>,
    pub tgt_vocab: Vec<String>,
    pub src_vocab_hash: String,
    pub tgt_vocab_hash: String,
    /// Training configuration, serialized by the training module.
    pub train: serde_json::Value,
    pub progress: Progress,
    pub best_valid: Option<f64>,
}

/// FNV-1a over the newline-joined words, as 16 hex digits.
pub fn vocab_hash(words: &[String]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            h ^= u64::from(b'\n');
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        for b in w.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self { name: name.into(), shape: t.shape().to_vec(), data: t.data().iter().map(|v| v.as_f64() as f32).collect() }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| T::from_f64(f64::from(v))).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(corrupt(format!("file ends inside {what} (offset {}, need {n} bytes)", self.at)));
        };
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} does not fit the checkpoint format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(meta.len() + 64 + self.tensors.iter().map(|t| 4 * t.data.len() + t.name.len() + 32).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, meta.len(), "metadata length")?;
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.tensors.len(), "tensor count")?;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Contract(format!("tensor '{}' shape {:?} holds {} values", t.name, t.shape, t.data.len())));
            }
            put_u32(&mut out, t.name.len(), "name length")?;
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len(), "rank")?;
            for &d in &t.shape {
                put_u32(&mut out, d, "dimension")?;
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let meta_len = r.len("metadata length")?;
        let meta = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| corrupt(format!("metadata: {e}")))?;
        let count = r.len("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.len("name length")?;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?).map_err(|_| corrupt("tensor name is not UTF-8"))?.to_string();
            let ndim = r.len("rank")?;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.len("dimension")?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| corrupt(format!("tensor '{name}' is impossibly large")))?;
            let raw = r.take(n, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.at != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        let ckpt = Self { meta, tensors };
        ckpt.verify_vocab()?;
        Ok(ckpt)
    }

    fn verify_vocab(&self) -> Result<()> {
        if vocab_hash(&self.meta.src_vocab) != self.meta.src_vocab_hash || vocab_hash(&self.meta.tgt_vocab) != self.meta.tgt_vocab_hash {
            return Err(corrupt("vocabulary does not match its recorded hash"));
        }
        Ok(())
    }

    /// Writes via a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the model stored in this checkpoint. With `expected`, the
    /// stored configuration must match it exactly.
    pub fn model<T: Scalar>(&self, expected: Option<&ModelConfig>) -> Result<Seq2SeqModel<T>> {
        if let Some(want) = expected {
            if want != &self.meta.model {
                return Err(Error::MetadataMismatch(format!("checkpoint holds {:?}, expected {want:?}", self.meta.model)));
            }
        }
        let config = &self.meta.model;
        if config.src_vocab != self.meta.src_vocab.len() + crate::corpus::RESERVED.len()
            || config.tgt_vocab != self.meta.tgt_vocab.len() + crate::corpus::RESERVED.len()
        {
            return Err(Error::MetadataMismatch("vocabulary sizes disagree with the model dimensions".into()));
        }
        let mut model = Seq2SeqModel::<T>::init(config.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let slots = model.tensors().len();
        let named = self.tensors[..slots.min(self.tensors.len())]
            .iter()
            .map(|t| Ok((t.name.clone(), t.to_tensor()?)))
            .collect::<Result<Vec<_>>>()?;
        model.load_tensors(named)?;
        Ok(model)
    }
}
