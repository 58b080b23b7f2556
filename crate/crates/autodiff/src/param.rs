//! Trainable parameters and their optimizer state.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its gradient buffer and Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    name: String,
    group: usize,
    pub(crate) value: Arc<Tensor<T>>,
    pub(crate) grad: Vec<T>,
    pub(crate) m: Vec<T>,
    pub(crate) v: Vec<T>,
    pub(crate) step: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Optimizer group; groups select per-group learning rates.
    pub fn group(&self) -> usize {
        self.group
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: usize) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutodiffError::InvalidArgument {
                op: "ParamStore::add",
                msg: format!("duplicate parameter name `{name}`"),
            });
        }
        let id = ParamId(self.params.len());
        let n = value.numel();
        self.params.push(Parameter {
            name: name.clone(),
            group,
            value: Arc::new(value),
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.params[id.0].value)
    }

    /// Mutable access to a value; copies only if a live graph still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Euclidean norm of one parameter's gradient.
    pub fn grad_norm(&self, id: ParamId) -> f64 {
        self.params[id.0]
            .grad
            .iter()
            .map(|g| {
                let g = g.to_f64().unwrap();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_grad(&self) -> (f64, Option<ParamId>) {
        let mut best = (0.0, None);
        for (i, p) in self.params.iter().enumerate() {
            for g in &p.grad {
                let a = g.to_f64().unwrap().abs();
                if !(a <= best.0) {
                    best = (a, Some(ParamId(i)));
                }
            }
        }
        best
    }

    /// Copy of the store in another precision (values only; optimizer state reset
    /// except the step counters).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let params = self
            .params
            .iter()
            .map(|p| {
                let n = p.value.numel();
                Parameter {
                    name: p.name.clone(),
                    group: p.group,
                    value: Arc::new(p.value.cast::<U>()),
                    grad: vec![U::zero(); n],
                    m: vec![U::zero(); n],
                    v: vec![U::zero(); n],
                    step: p.step,
                }
            })
            .collect();
        ParamStore {
            params,
            index: self.index.clone(),
        }
    }

    pub(crate) fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }
}
