use indexmap::IndexMap;

use super::tape::Gradients;
use super::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors plus non-trainable buffers (batch-norm running
/// statistics), kept in insertion order so checkpoints are stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn by_index(&self, i: usize) -> (&str, &Tensor) {
        let (k, v) = self.entries.get_index(i).expect("param index");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, i: usize) -> (&str, &mut Tensor) {
        let (k, v) = self.entries.get_index_mut(i).expect("param index");
        (k.as_str(), v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|t| t.requires_grad)
            .map(Tensor::numel)
            .sum()
    }

    /// Add the gradients of one backward pass to each trainable tensor.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, (_, t)) in self.entries.iter_mut().enumerate() {
            if !t.requires_grad {
                continue;
            }
            if let Some(g) = grads.param(i) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Overwrite values (not gradients) from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.entries.iter_mut() {
            let src = other.get(name)?;
            if src.shape() != t.shape() {
                return Err(Error::dim(format!("shape mismatch for {name}")));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
