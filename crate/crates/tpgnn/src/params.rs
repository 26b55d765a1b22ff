//! Central registry of learned tensors.
//!
//! Components register their parameters once at model construction and keep
//! typed handles. Each training step binds the whole store onto a fresh tape
//! as leaves, so gradients come back aligned with the registry and the
//! optimizer can walk every parameter uniformly.

use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the registry, aligned with [`ParamStore::tensors`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    tensors: Vec<Tensor<T>>,
    names: Vec<String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.tensors.push(tensor);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) {
        assert_eq!(self.tensors[id.0].shape(), tensor.shape());
        self.tensors[id.0] = tensor;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Element counts per tensor, the optimizer's roster.
    pub fn sizes(&self) -> Vec<usize> {
        self.tensors.iter().map(Tensor::numel).collect()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            ids: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Iterator over (id, tensor) pairs.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape leaf ids for one binding of a [`ParamStore`].
pub struct BoundParams {
    ids: Vec<ValueId>,
}

impl BoundParams {
    pub fn id(&self, p: ParamId) -> ValueId {
        self.ids[p.0]
    }

    /// Gradient tensors in registry order, for the optimizer.
    pub fn gradients<T: Scalar>(&self, grads: &crate::tape::Gradients<T>) -> Vec<Tensor<T>> {
        self.ids.iter().map(|&id| grads.wrt(id)).collect()
    }
}
