use std::collections::HashMap;

use crate::{Gradients, Result, Scalar, Tensor, TensorError};

/// Stable handle of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Accumulated gradient; always `None` for frozen parameters.
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

/// Named, shaped parameters with persistent identity.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a trainable parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// Registers a parameter that never receives gradient.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor<T>, requires_grad: bool) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            requires_grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Parameters that take part in optimization.
    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.iter().filter(|(_, p)| p.requires_grad)
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.trainable().map(|(_, p)| p.value.numel()).sum()
    }

    /// Adds the parameter gradients of one backward pass.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            self.accumulate_one(id, g.data(), T::one());
        }
    }

    /// Adds `scale · g` into the gradient of `id`.
    pub fn accumulate_one(&mut self, id: ParamId, g: &[T], scale: T) {
        let p = &mut self.params[id.0];
        if !p.requires_grad {
            return;
        }
        let acc = p
            .grad
            .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (a, &v) in acc.data_mut().iter_mut().zip(g) {
            *a += scale * v;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "param_set",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Same store converted to another precision; gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    requires_grad: p.requires_grad,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
