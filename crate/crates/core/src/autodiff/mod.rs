//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every primitive records its output value together with a [`Backward`]
//! rule. Nodes are appended in execution order, so the tape is always
//! topologically sorted and a single reverse sweep from the root suffices.

mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use ops::BinaryKind;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Local derivative rule of a recorded operation.
///
/// Given the forward inputs and output plus the gradient flowing into the
/// output, returns the gradient for each input. Entries may be `None` when
/// `needs[i]` is false.
pub trait Backward<E: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>>;
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<E>>>,
    requires_grad: bool,
}

pub struct Tape<E: Scalar> {
    id: u64,
    nodes: Vec<Node<E>>,
    div_floor: E,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            div_floor: E::of(1e-12),
        }
    }

    /// Minimum divisor magnitude accepted by [`Tape::div`].
    pub fn with_div_floor(mut self, floor: E) -> Self {
        self.div_floor = floor;
        self
    }

    pub fn div_floor(&self) -> E {
        self.div_floor
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<E> {
        assert_eq!(var.tape, self.id, "variable used with a foreign tape");
        &self.nodes[var.index].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.index].requires_grad
    }

    pub(crate) fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    fn push(
        &mut self,
        value: Tensor<E>,
        inputs: Vec<usize>,
        op: Option<Box<dyn Backward<E>>>,
        requires_grad: bool,
    ) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    /// Records an operation. The rule is dropped when no input needs a gradient.
    pub fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor<E>,
        op: impl Backward<E> + 'static,
    ) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let op: Option<Box<dyn Backward<E>>> = if requires_grad {
            Some(Box::new(op))
        } else {
            None
        };
        Ok(self.push(
            value,
            inputs.iter().map(|v| v.index).collect(),
            op,
            requires_grad,
        ))
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// requires one. Each call starts from zeroed gradients; use
    /// [`Gradients::accumulate`] to sum several passes explicitly.
    pub fn backward(&self, root: Var) -> Result<Gradients<E>> {
        self.check(root)?;
        let root_value = &self.nodes[root.index].value;
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        root_value.check_finite("backward root")?;

        let mut grads: Vec<Option<Tensor<E>>> = (0..=root.index).map(|_| None).collect();
        grads[root.index] = Some(Tensor::ones(root_value.shape()));
        for index in (0..=root.index).rev() {
            let node = &self.nodes[index];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[index].take() else { continue };
            let inputs: Vec<&Tensor<E>> =
                node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs)?;
            grads[index] = Some(grad);
            for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[input].value.shape(),
                    "{} produced a gradient of the wrong shape",
                    op.name()
                );
                match &mut grads[input] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<E: Scalar> {
    tape: u64,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    /// The gradient for `var`, or `None` if it is unreachable from the root
    /// or does not require a gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor<E>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`], but unreachable nodes yield zeros of `shape`.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<E> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Adds another pass's gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients<E>) -> Result<()> {
        if other.tape != self.tape {
            return Err(Error::ForeignVar);
        }
        if other.grads.len() > self.grads.len() {
            self.grads.resize_with(other.grads.len(), || None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => {
                    *a = a.add(b)?;
                }
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
        Ok(())
    }
}
