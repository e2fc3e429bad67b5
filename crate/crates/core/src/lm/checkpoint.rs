//! LM checkpoint: an 8-byte magic, a little-endian `u64` header length, a JSON
//! header with dimensions, tensor layout and digest, then every weight as a
//! little-endian `f64` in declared order. The vocabulary lives next to it as a
//! JSON token→id map.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{LmConfig, TinyDecoderLM};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"LGPTLM01";

#[derive(Serialize, Deserialize)]
struct Header {
    config: LmConfig,
    digest: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
}

pub fn vocab_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".vocab.json");
    PathBuf::from(p)
}

pub fn to_bytes(lm: &TinyDecoderLM) -> Vec<u8> {
    let header = Header {
        config: lm.config().clone(),
        digest: lm.digest(),
        tensors: lm
            .store()
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                group: p.group.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("serializable");
    let mut out = Vec::with_capacity(16 + json.len() + lm.store().num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in lm.store().iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint and checks the stored digest. The model comes back frozen.
pub fn from_bytes(bytes: &[u8]) -> Result<TinyDecoderLM> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not an LM checkpoint"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut rest = &bytes[16 + hlen..];
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        if rest.len() < n * 8 {
            return Err(bad("truncated weights"));
        }
        let data = rest[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        rest = &rest[n * 8..];
        store.add(
            t.name.clone(),
            t.group.clone(),
            Tensor::new(t.shape.clone(), data)?,
        );
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes after weights"));
    }
    if store.digest() != header.digest {
        return Err(bad("weight digest mismatch"));
    }
    let mut lm = TinyDecoderLM::from_store(header.config, store)?;
    lm.freeze();
    Ok(lm)
}

pub fn save(lm: &TinyDecoderLM, vocab: &Vocab, path: &Path) -> Result<()> {
    if lm.config().vocab_size != vocab.len() {
        return Err(Error::Checkpoint(
            "vocabulary size does not match the model".into(),
        ));
    }
    write_atomic(path, &to_bytes(lm))?;
    write_atomic(&vocab_path(path), vocab.to_json().as_bytes())
}

pub fn load(path: &Path) -> Result<(TinyDecoderLM, Vocab)> {
    let lm = from_bytes(&std::fs::read(path)?)?;
    let vocab = Vocab::from_json(&std::fs::read_to_string(vocab_path(path))?)?;
    if lm.config().vocab_size != vocab.len() {
        return Err(Error::Checkpoint(
            "vocabulary size does not match the model".into(),
        ));
    }
    Ok((lm, vocab))
}
