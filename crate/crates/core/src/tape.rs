//! Reverse-mode differentiation record.
//!
//! Every forward operation appends a [`Node`] holding its output value and
//! enough saved state to apply its vector-Jacobian product later. Nodes are
//! appended in execution order, so a reverse sweep over the node list is a
//! valid reverse topological order.

use crate::error::{Error, Result};
use crate::ops::Op;
use crate::param::ParamId;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    pub(crate) param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant or input tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Leaf, value, None)
    }

    pub(crate) fn param_leaf(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push_node(Op::Leaf, value, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        self.nodes[v.0].param
    }

    pub(crate) fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.push_node(op, value, None)
    }

    fn push_node(&mut self, op: Op, value: Tensor, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { op, value, param });
        Var(self.nodes.len() - 1)
    }

    /// Propagates `d loss / d v` to every leaf that `loss` depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(shape));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in node.op.vjp(&node.value, &g, self) {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the loss does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros shaped like its value.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    pub(crate) fn params<'a>(&'a self, tape: &'a Tape) -> impl Iterator<Item = (ParamId, &'a Tensor)> + 'a {
        tape.nodes.iter().zip(&self.grads).filter_map(|(node, g)| match (node.param, g) {
            (Some(id), Some(g)) => Some((id, g)),
            _ => None,
        })
    }
}
