//! Binary checkpoint format.
//!
//! ```text
//! b"UTP1"
//! u64 LE   header length, then the JSON header
//! u32 LE   tensor count
//! per tensor: u32 name length, name (UTF-8), u32 ndim, ndim x u64 dims,
//!             prod(dims) x f64 LE values
//! ```
//!
//! Encoder tensors come first in binding order, then the QA head's when the
//! header says it has one. Writes go to a sibling temp file that is renamed
//! into place, so a crashed run never leaves a half-written checkpoint.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use utp_core::objectives::Similarity;
use utp_core::params::ParamStore;
use utp_core::qa::CellSelectionHead;
use utp_core::train::Checkpoint;
use utp_core::{Encoder, ModelConfig, Tensor, Vocab};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UTP1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    vocab_hash: String,
    similarity: Similarity,
    qa_head: bool,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let header = Header {
        config: ckpt.encoder.config().clone(),
        vocab: ckpt.vocab.tokens().to_vec(),
        vocab_hash: ckpt.vocab.hash(),
        similarity: ckpt.similarity,
        qa_head: ckpt.qa_head.is_some(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let head = ckpt.qa_head.as_ref().map(|h| h.params().params()).unwrap_or(&[]);
    let params = ckpt.encoder.params().params().iter().chain(head);
    out.extend_from_slice(&((ckpt.encoder.params().len() + head.len()) as u32).to_le_bytes());
    for p in params {
        push_tensor(&mut out, &p.name, &p.tensor);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated(what));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &'static str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Truncated(what))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32("tensor name")?;
        let name = std::str::from_utf8(self.take(n, "tensor name")?)
            .map_err(|_| Error::BadHeader("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = self.u32("tensor shape")?;
        let shape = (0..ndim).map(|_| self.u64("tensor shape")).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Truncated("tensor data"))?;
        let bytes = self.take(len.checked_mul(8).ok_or(Error::Truncated("tensor data"))?, "tensor data")?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

/// Decodes a checkpoint. With `expected_vocab`, a different vocabulary is an
/// error rather than silently remapping token ids.
pub fn from_bytes(bytes: &[u8], expected_vocab: Option<&Vocab>) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotACheckpoint);
    }
    let mut r = Reader { buf: &bytes[4..] };
    let n = r.u64("header length")?;
    let header: Header = serde_json::from_slice(r.take(n, "header")?).map_err(|e| Error::BadHeader(e.to_string()))?;
    let vocab = Vocab::from_tokens(header.vocab)?;
    if vocab.hash() != header.vocab_hash {
        return Err(Error::VocabMismatch {
            expected: header.vocab_hash,
            found: vocab.hash(),
        });
    }
    if let Some(v) = expected_vocab {
        if v.hash() != vocab.hash() {
            return Err(Error::VocabMismatch {
                expected: v.hash(),
                found: vocab.hash(),
            });
        }
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    if !r.buf.is_empty() {
        return Err(Error::BadHeader(format!("{} trailing bytes", r.buf.len())));
    }
    let n_head = if header.qa_head { 2 } else { 0 };
    if tensors.len() < n_head {
        return Err(Error::Core(utp_core::Error::ParamLayout("qa head".into())));
    }
    let split = tensors.len() - n_head;
    let head_tensors = tensors.split_off(split);
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        // decay flags are restored from the layout by from_params
        store.push(name, t, true);
    }
    let d_model = header.config.d_model;
    let encoder = Encoder::from_params(header.config, store)?;
    let qa_head = if header.qa_head {
        let mut hs = ParamStore::new();
        for (name, t) in head_tensors {
            hs.push(name, t, true);
        }
        Some(CellSelectionHead::from_params(d_model, hs)?)
    } else {
        None
    };
    Ok(Checkpoint {
        encoder,
        vocab,
        similarity: header.similarity,
        qa_head,
    })
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_bytes_atomic(path, &to_bytes(ckpt))
}

pub fn load(path: &Path, expected_vocab: Option<&Vocab>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected_vocab)
}
