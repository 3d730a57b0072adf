use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn push_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.push(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn push_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.push(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Sets every parameter to `value`.
    pub fn fill(&mut self, value: f64) {
        for t in &mut self.tensors {
            t.data_mut().fill(value);
        }
    }

    /// Records every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Records every parameter as a constant, for gradient-free evaluation.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Replaces all values, checking names and shapes match.
    pub fn assign(&mut self, names: &[String], tensors: Vec<Tensor>) -> Result<()> {
        if names != self.names.as_slice() || tensors.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "parameter layout mismatch: expected {:?}, got {names:?}",
                self.names
            )));
        }
        for (name, (old, new)) in names.iter().zip(self.tensors.iter().zip(&tensors)) {
            if old.shape() != new.shape() {
                return Err(Error::invalid(format!(
                    "parameter {name}: expected shape {:?}, got {:?}",
                    old.shape(),
                    new.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}
