//! Named parameter storage shared by layers, the optimizer and checkpoints.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<E> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
}

impl<E: Scalar> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    /// Total number of learnable scalars.
    pub fn count_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a tensor's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        self.tensors[id.0].expect_same_shape(&value, "set parameter")?;
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = E::zero());
        }
    }

    pub fn cast<F: Scalar>(&self) -> ParamSet<F> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Overwrites every tensor with the same-named one from `other`.
    /// Names and shapes must match exactly.
    pub fn load_from(&mut self, other: &ParamSet<E>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, value) in other.iter() {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if self.get(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    self.get(id).shape()
                )));
            }
            self.tensors[id.0] = value.clone();
        }
        Ok(())
    }

    /// Places every parameter on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<E>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape variables for each parameter of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables already on a tape, one per parameter in order.
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient per parameter, zeros where a parameter did not reach the root.
    pub fn gradients<E: Scalar>(&self, params: &ParamSet<E>, grads: &Gradients<E>) -> Vec<Tensor<E>> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }
}
