//! Reverse-mode autodiff tape.
//!
//! Every operation appends a node holding its value, the indices of its
//! parents and a backward closure. `Graph::backward` walks the tape in
//! reverse and returns the gradients of all leaves that require them.

use crate::error::{Error, Result};
use crate::nn::params::ParamId;
use crate::nn::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees: the gradient flowing into the node, the
/// values of the node's parents and of the node itself, and which parents
/// actually need a gradient.
pub struct BackwardArgs<'a, S> {
    pub grad: &'a Tensor<S>,
    pub inputs: &'a [&'a Tensor<S>],
    pub output: &'a Tensor<S>,
    pub needs: &'a [bool],
}

/// Returns one optional gradient per parent, in parent order.
pub type BackwardFn<S> = Box<dyn Fn(&BackwardArgs<'_, S>) -> Vec<Option<Tensor<S>>> + Send + Sync>;

struct Node<S> {
    op: &'static str,
    value: Tensor<S>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A leaf whose gradient is reported by `backward`.
    pub fn variable(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, true, None)
    }

    pub(crate) fn param_leaf(&mut self, id: ParamId, value: Tensor<S>, trainable: bool) -> Var {
        self.push_leaf(value, trainable, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an operation. The value is checked for non-finite entries.
    pub fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor<S>,
        parents: &[Var],
        backward: BackwardFn<S>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Backpropagate from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape("backward", "scalar loss", format!("{:?}", root.value.shape())));
        }
        let mut pending: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::full(root.value.shape(), S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else {
                if node.requires_grad {
                    leaves[idx] = Some(grad);
                }
                continue;
            };
            let inputs: Vec<&Tensor<S>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = backward(&BackwardArgs {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[p].value.shape() {
                    return Err(Error::shape(
                        node.op,
                        format!("{:?}", self.nodes[p].value.shape()),
                        format!("gradient {:?}", g.shape()),
                    ));
                }
                match &mut pending[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (id, Var(i))))
            .collect();
        Ok(Gradients { leaves, params })
    }
}

pub struct Gradients<S> {
    leaves: Vec<Option<Tensor<S>>>,
    params: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of parameter leaves, keyed by parameter id.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }
}
