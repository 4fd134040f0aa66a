use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{ParamId, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

/// Inputs handed to an operation's backward closure.
pub struct BackwardArgs<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    /// Forward values of the parents, in recording order.
    pub inputs: Vec<&'a Tensor<T>>,
    /// This node's forward value.
    pub output: &'a Tensor<T>,
    /// Which parents need a gradient; closures may skip the others.
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn FnOnce(BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Option<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Linear record of a forward computation, replayed in reverse by
/// [`Tape::backward`]. One tape per forward pass; it is consumed by the
/// backward pass.
pub struct Tape<T> {
    id: usize,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn var(&self, index: usize) -> Var {
        Var {
            tape: self.id,
            index,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    /// Leaf whose differentiability follows `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push_leaf(tensor, requires_grad, None)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_leaf(tensor, false, None)
    }

    /// Leaf bound to a stored parameter; its gradient is reported by id.
    pub fn param_leaf(&mut self, id: ParamId, tensor: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(tensor, requires_grad, Some(id))
    }

    fn push_leaf(&mut self, tensor: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value: Some(tensor),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param,
        });
        self.var(self.nodes.len() - 1)
    }

    /// Records an operation. The closure is only kept if some parent needs
    /// a gradient.
    pub fn push<F>(&mut self, value: Tensor<T>, parents: &[Var], backward: F) -> Result<Var>
    where
        F: FnOnce(BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let mut idx = Vec::with_capacity(parents.len());
        for &p in parents {
            idx.push(self.check(p)?);
        }
        let requires_grad = idx.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            parents: idx,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
            param: None,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        self.nodes[v.index]
            .value
            .as_ref()
            .expect("value released by backward")
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        let i = self.check(v)?;
        self.nodes[i].value.as_ref().ok_or(Error::ForeignVar)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Sum of all element counts held by non-leaf nodes.
    pub fn intermediate_elements(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !n.parents.is_empty())
            .filter_map(|n| n.value.as_ref())
            .map(|t| t.numel())
            .sum()
    }

    /// Reverse pass from a scalar `loss`. Node values are released as soon
    /// as no remaining closure can read them.
    pub fn backward(mut self, loss: Var) -> Result<Grads<T>> {
        let root = self.check(loss)?;
        let root_shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(root_shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(&root_shape));
        let mut out = Grads {
            params: HashMap::new(),
            leaves: HashMap::new(),
            tape: self.id,
        };
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else {
                self.nodes[i].value = None;
                continue;
            };
            if !self.nodes[i].requires_grad {
                self.nodes[i].value = None;
                continue;
            }
            let (lower, upper) = self.nodes.split_at_mut(i);
            let node = &mut upper[0];
            match node.backward.take() {
                None => {
                    if let Some(pid) = node.param {
                        match out.params.get_mut(&pid) {
                            Some(acc) => acc.add_assign(&g)?,
                            None => {
                                out.params.insert(pid, g);
                            }
                        }
                    } else {
                        out.leaves.insert(i, g);
                    }
                }
                Some(f) => {
                    let output = node.value.as_ref().expect("live node");
                    let inputs: Vec<&Tensor<T>> = node
                        .parents
                        .iter()
                        .map(|&p| lower[p].value.as_ref().expect("parent value"))
                        .collect();
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| lower[p].requires_grad)
                        .collect();
                    let parent_grads = f(BackwardArgs {
                        grad: &g,
                        inputs,
                        output,
                        needs,
                    });
                    let parents = std::mem::take(&mut node.parents);
                    for (p, pg) in parents.into_iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !lower[p].requires_grad {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg)?,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
            self.nodes[i].value = None;
        }
        Ok(out)
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
    tape: usize,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a parameter, `None` if it was unreachable from the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient of a parameter, zeros of `shape` if unreachable.
    pub fn param_or_zeros(&self, id: ParamId, shape: &[usize]) -> Tensor<T> {
        self.params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Gradient of a non-parameter leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.get(&v.index)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}
