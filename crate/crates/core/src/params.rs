//! Named parameter tensors.

use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether decoupled weight decay applies (false for biases and norms).
    pub decay: bool,
}

/// Ordered, named parameters. Order is stable and defines binding order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> usize {
        self.params.push(Param {
            name: name.into(),
            tensor,
            decay,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.params[index].tensor
    }

    /// Adds every tensor to `g` as a leaf, in store order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.tensor.clone(), trainable))
            .collect()
    }

    /// Gradients for bound vars, in store order.
    pub fn grads(&self, g: &Graph, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| g.grad(v)).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }
}
