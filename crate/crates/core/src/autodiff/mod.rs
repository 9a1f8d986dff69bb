//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! with an Adam optimizer and a binary checkpoint format.

mod adam;
mod checkpoint;
mod gemm;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use tape::{bce_term, quat_mirror_z, sigmoid, Grads, Plane, Tape, Var, BCE_EPS};
pub use tensor::Tensor;


use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copy values for every name present in both stores with equal shapes.
    pub fn copy_from(&mut self, other: &ParamStore, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in other.iter() {
            if !filter(name) {
                continue;
            }
            let Some(id) = self.find(name) else { continue };
            if self.tensors[id.0].shape != t.shape {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    self.tensors[id.0].shape, t.shape
                )));
            }
            self.tensors[id.0] = t.clone();
            copied += 1;
        }
        Ok(copied)
    }
}
