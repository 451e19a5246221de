use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numcore::{Scalar, Tensor};

/// Which inputs a parameter serves. Action and depth parameters receive no
/// gradient from batches where that modality is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Shared,
    Action,
    Depth,
}

/// Named parameter tensors in a fixed order. Tensors are reference counted
/// so concurrent forward passes can share them without copies.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    tensors: Vec<Arc<Tensor<S>>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            groups: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, t: Tensor<S>) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.groups.push(group);
        self.tensors.push(Arc::new(t));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn group(&self, i: usize) -> ParamGroup {
        self.groups[i]
    }

    pub(crate) fn set_group(&mut self, i: usize, group: ParamGroup) {
        self.groups[i] = group;
    }

    pub fn tensor(&self, i: usize) -> &Tensor<S> {
        &self.tensors[i]
    }

    pub fn shared(&self, i: usize) -> Arc<Tensor<S>> {
        Arc::clone(&self.tensors[i])
    }

    /// Mutable access; copies the buffer if a forward pass still holds it.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<S> {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| self.tensor(i))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamGroup, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.groups)
            .zip(&self.tensors)
            .map(|((n, g), t)| (n.as_str(), *g, t.as_ref()))
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            groups: self.groups.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
        }
    }

    /// True when both stores hold the same names, shapes and bits.
    pub fn bit_equal(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.bits() == y.bits())
            })
    }
}
