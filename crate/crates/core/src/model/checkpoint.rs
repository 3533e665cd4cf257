//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header holding the model config, vocabularies and tensor index, then each
//! tensor's values as little-endian `f64` in index order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::data::Vocabularies;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"RELATTN\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocabs: Vocabularies,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> std::io::Result<()> {
    let header = Header {
        config: model.config.clone(),
        vocabs: model.vocabs.clone(),
        tensors: model
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                trainable: t.requires_grad,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, t) in model.params.iter() {
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Model> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| corrupt(format!("read failed: {e}")))?;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| corrupt("unexpected end of file"))?;
        *pos += n;
        Ok(s)
    };
    let mut pos = 0;
    if take(&mut pos, 8)? != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&mut pos, len)?)
        .map_err(|e| corrupt(format!("bad header: {e}")))?;
    let mut params = ParamStore::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = take(&mut pos, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut t = Tensor::new(&entry.shape, data)?;
        t.requires_grad = entry.trainable;
        params.insert(entry.name, t);
    }
    if pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - pos)));
    }
    header.config.validate()?;
    for spec in header.config.param_specs(&header.vocabs) {
        let t = params
            .get(&spec.name)
            .map_err(|_| corrupt(format!("missing tensor {}", spec.name)))?;
        if t.shape() != spec.shape.as_slice() {
            return Err(corrupt(format!("tensor {} has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape)));
        }
    }
    Ok(Model {
        config: header.config,
        vocabs: header.vocabs,
        params,
    })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
