use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::{ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

/// Backward rule of one recorded primitive.
///
/// Receives the upstream gradient, the input values, the output value and a
/// mask of which inputs need a gradient; returns one entry per input.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Vec<T>>>>;

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<usize>,
    pub(crate) backward: Option<BackwardFn<T>>,
    pub(crate) param: Option<ParamId>,
}

/// A define-by-run computation tape.
///
/// Entries are appended in evaluation order, so every input of entry `k` is
/// an earlier entry. A graph is owned by a single evaluation; concurrent
/// evaluations each build their own graph over a shared [`ParamStore`].
pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
    strict: bool,
}

/// Handle to a value recorded on a [`Graph`].
pub struct Var<'g, T: Scalar> {
    pub(crate) graph: &'g Graph<'g, T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph without parameters.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            grad_enabled: true,
            strict: false,
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Inference mode: nothing requires gradient and no backward rule is kept.
    pub fn no_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    /// Reject non-finite operator inputs.
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn params(&self) -> Option<&'p ParamStore<T>> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.push(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
            param: None,
        });
        Var { graph: self.cast(), id }
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.push(Node {
            value,
            requires_grad: self.grad_enabled,
            parents: Vec::new(),
            backward: None,
            param: None,
        });
        Var { graph: self.cast(), id }
    }

    /// The parameter `id` of the attached store, recorded once per graph.
    pub fn param(&self, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { graph: self.cast(), id: node };
        }
        let store = self.params.expect("graph has no parameter store attached");
        let p = store.get(id);
        let node = self.push(Node {
            value: p.value.clone(),
            requires_grad: self.grad_enabled && p.requires_grad,
            parents: Vec::new(),
            backward: None,
            param: Some(id),
        });
        self.param_nodes.borrow_mut().insert(id, node);
        Var { graph: self.cast(), id: node }
    }

    fn cast(&self) -> &Graph<'_, T> {
        self
    }

    pub(crate) fn node_value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Records one primitive. `forward` computes the output from the input
    /// values and, when `needs_backward` is set, returns the backward rule.
    pub(crate) fn apply<F>(&self, op: &'static str, inputs: &[usize], forward: F) -> Result<usize>
    where
        F: FnOnce(&[&Tensor<T>], bool) -> Result<(Tensor<T>, Option<BackwardFn<T>>)>,
    {
        let (value, backward, requires_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| &nodes[i].value).collect();
            if self.strict && values.iter().any(|v| !v.all_finite()) {
                return Err(TensorError::NonFinite { op });
            }
            let requires_grad =
                self.grad_enabled && inputs.iter().any(|&i| nodes[i].requires_grad);
            let (value, backward) = forward(&values, requires_grad)?;
            (value, if requires_grad { backward } else { None }, requires_grad)
        };
        Ok(self.push(Node {
            value,
            requires_grad,
            parents: inputs.to_vec(),
            backward,
            param: None,
        }))
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Each recorded entry is visited once, in reverse order. The returned
    /// gradients can be folded into the store with
    /// [`ParamStore::accumulate`]; doing so twice doubles them.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let input_grads = backward(&upstream, &inputs, &node.value, &needs);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for ((&parent, g), &need) in node.parents.iter().zip(input_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(upstream);
        }

        let mut node_grads = Vec::with_capacity(nodes.len());
        let mut params = Vec::new();
        for (node, g) in nodes.iter().zip(grads) {
            let g = match g {
                Some(g) if node.requires_grad => {
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                // a leaf the loss does not depend on has an exactly-zero gradient
                None if node.requires_grad && node.parents.is_empty() => {
                    Some(Tensor::zeros(node.value.shape()))
                }
                _ => None,
            };
            if let (Some(pid), Some(g)) = (node.param, &g) {
                params.push((pid, g.clone()));
            }
            node_grads.push(g);
        }
        Ok(Gradients {
            nodes: node_grads,
            params,
        })
    }
}

/// Result of one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a recorded value; `None` when the
    /// value does not require gradient or the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.nodes.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }

    /// Keeps only parameter gradients, releasing intermediate buffers.
    pub fn into_param_grads(self) -> Vec<(ParamId, Tensor<T>)> {
        self.params
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<'g, T> {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        self.graph.node_value(self.id)
    }

    /// Owned copy of the current value.
    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> Result<T> {
        self.value().item()
    }
}
