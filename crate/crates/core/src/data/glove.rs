use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::Vocab;
use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

/// Word-embedding matrix aligned with a [`Vocab`].
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    /// Number of vocabulary entries found in the vector file.
    pub hits: usize,
}

/// Read whitespace-separated `token v1 … v_dim` lines. Vocabulary entries
/// missing from the file keep a `Uniform(-0.01, 0.01)` row; row 0 (padding)
/// is zero.
pub fn load_glove(path: impl AsRef<Path>, vocab: &Vocab, dim: usize, rng: &mut RngState) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut data: Vec<f64> = (0..vocab.len() * dim).map(|_| rng.uniform(-0.01, 0.01)).collect();
    data[..dim].fill(0.0);
    let mut hits = 0;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap_or_default();
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                msg: format!("line {}: expected {dim} values, found {}", lineno + 1, values.len()),
            });
        }
        let Some(id) = vocab.get(token).filter(|&id| id != Vocab::PAD_ID) else {
            continue;
        };
        for (j, v) in values.iter().enumerate() {
            data[id * dim + j] = v.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                msg: format!("line {}: bad number {v:?}", lineno + 1),
            })?;
        }
        hits += 1;
    }
    Ok(EmbeddingTable {
        matrix: Tensor::new(&[vocab.len(), dim], data)?,
        hits,
    })
}
