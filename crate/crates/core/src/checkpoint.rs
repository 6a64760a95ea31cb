//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `TRNLCKPT`, a little-endian `u32` format version, a `u64` header
//! length, a JSON header (dimensions, vocabularies, tensor names and shapes), then the raw
//! little-endian `f64` payload of every tensor in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"TRNLCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Trained parameters together with the vocabularies they were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dims: ModelDims,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Result<Self> {
        params.validate()?;
        let dims = params.dims();
        if dims.src_vocab != src_vocab.len() || dims.tgt_vocab != tgt_vocab.len() {
            return Err(Error::Compatibility(format!(
                "vocabulary sizes {}/{} do not match model dimensions {}/{}",
                src_vocab.len(),
                tgt_vocab.len(),
                dims.src_vocab,
                dims.tgt_vocab
            )));
        }
        Ok(Self {
            params,
            src_vocab,
            tgt_vocab,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.params.dims()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: FORMAT_VERSION,
            dims: self.dims(),
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            tensors: ModelParams::names()
                .into_iter()
                .zip(self.params.tensors())
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.tensors() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Compatibility(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::Compatibility(format!("bad header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad("header version disagrees with file version"));
        }
        header.dims.validate()?;

        let expected = ModelParams::expected_shapes(header.dims);
        let names = ModelParams::names();
        if header.tensors.len() != expected.len() {
            return Err(bad("wrong number of tensors"));
        }
        let mut payload = &body[header_len..];
        let mut tensors = Vec::with_capacity(expected.len());
        for ((entry, shape), name) in header.tensors.iter().zip(&expected).zip(&names) {
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::Compatibility(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            let n: usize = shape.iter().product();
            if payload.len() < 8 * n {
                return Err(bad("truncated payload"));
            }
            let data = payload[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload = &payload[8 * n..];
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        let params = ModelParams::from_list(tensors).expect("tensor count checked");
        Self::new(params, header.src_vocab, header.tgt_vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
