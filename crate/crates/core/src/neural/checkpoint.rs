//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `R2TCKPT\0`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header (model config, tagset,
//! character inventory, tensor directory, embedding vocabulary) and then
//! every `f64` in little-endian order: parameters in directory order,
//! followed by the embedding rows and the OOV vector. Values are stored
//! bit-for-bit.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::embeddings::EmbeddingTable;
use super::model::{CharVocab, Tagger};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::corpus::Tagset;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"R2TCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tagset: Tagset,
    chars: String,
    tensors: Vec<TensorEntry>,
    embedding_dim: usize,
    embedding_words: Vec<String>,
}

pub fn to_bytes(tagger: &Tagger) -> Vec<u8> {
    let header = Header {
        config: tagger.config().clone(),
        tagset: tagger.tagset().clone(),
        chars: tagger.chars().chars().iter().collect(),
        tensors: tagger
            .params()
            .iter()
            .map(|(name, t)| TensorEntry { name: name.to_string(), rows: t.rows(), cols: t.cols() })
            .collect(),
        embedding_dim: tagger.embeddings().dim(),
        embedding_words: tagger.embeddings().words().to_vec(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let emb = tagger.embeddings();
    let n_values = tagger.params().num_scalars() + emb.raw_vectors().len() + emb.dim();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let values = tagger
        .params()
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter())
        .chain(emb.raw_vectors())
        .chain(emb.oov_vector());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Schema("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Tagger> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Schema("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Schema(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Schema(format!("bad checkpoint header: {e}")))?;
    let mut params = ParamSet::new();
    for t in &header.tensors {
        let data = r.f64s(t.rows * t.cols)?;
        params.add(t.name.clone(), Tensor::from_vec(t.rows, t.cols, data));
    }
    let d = header.embedding_dim;
    let vectors = r.f64s(header.embedding_words.len() * d)?;
    let oov = r.f64s(d)?;
    if r.pos != buf.len() {
        return Err(Error::Schema("trailing bytes after checkpoint payload".into()));
    }
    let embeddings = EmbeddingTable::from_raw(d, header.embedding_words, vectors, oov)?;
    let chars = CharVocab::from_chars(header.chars.chars());
    Tagger::from_parts(header.config, header.tagset, chars, embeddings, params)
}

pub fn save_checkpoint(tagger: &Tagger, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(tagger)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Tagger> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
