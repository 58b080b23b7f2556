//! Define-by-run computation graph and the reverse sweep.
//!
//! Nodes are appended in evaluation order, so creation order is a topological
//! order and the backward pass simply walks the node list from the loss down.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::ops::{backward_op, Op};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Graph<T: Scalar> {
    pub(crate) inner: RefCell<Inner<T>>,
}

pub(crate) struct Inner<T: Scalar> {
    pub(crate) values: Vec<Arc<Tensor<T>>>,
    pub(crate) ops: Vec<Op<T>>,
    pub(crate) requires_grad: Vec<bool>,
    pub(crate) grads: Vec<Option<Vec<T>>>,
    leaf_params: Vec<(ParamId, usize)>,
    param_nodes: HashMap<ParamId, usize>,
    backward_done: bool,
    no_grad: bool,
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T: Scalar> {
    pub(crate) graph: &'g Graph<T>,
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
        write!(f, "Var({}, shape={:?})", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                ops: Vec::new(),
                requires_grad: Vec::new(),
                grads: Vec::new(),
                leaf_params: Vec::new(),
                param_nodes: HashMap::new(),
                backward_done: false,
                no_grad: false,
            }),
        }
    }

    /// Graph that records values only; nothing requires gradients.
    pub fn inference() -> Self {
        let g = Self::new();
        g.inner.borrow_mut().no_grad = true;
        g
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf bound to a parameter. Repeated calls return the same node.
    pub fn param<'g>(&'g self, store: &ParamStore<T>, id: ParamId) -> Var<'g, T> {
        if let Some(&node) = self.inner.borrow().param_nodes.get(&id) {
            return Var { graph: self, id: node };
        }
        let value = store.value_arc(id);
        let mut inner = self.inner.borrow_mut();
        let requires = !inner.no_grad;
        let node = inner.push_arc(value, Op::Leaf, requires);
        inner.param_nodes.insert(id, node);
        inner.leaf_params.push((id, node));
        Var { graph: self, id: node }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that is not a stored parameter but whose gradient is wanted.
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        let requires = !self.inner.borrow().no_grad;
        self.push(value, Op::Leaf, requires)
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let id = self.inner.borrow_mut().push_arc(Arc::new(value), op, requires_grad);
        Var { graph: self, id }
    }

    pub(crate) fn requires(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.requires_grad[i])
    }

    /// Runs the reverse sweep from a scalar `loss`.
    ///
    /// A graph supports exactly one backward pass; a second call is rejected.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let shape = inner.values[loss.id].shape().to_vec();
        if inner.values[loss.id].numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        inner.backward_done = true;
        if !inner.requires_grad[loss.id] {
            return Ok(());
        }
        inner.grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(grad) = inner.grads[id].take() else {
                continue;
            };
            if matches!(inner.ops[id], Op::Leaf) {
                inner.grads[id] = Some(grad);
                continue;
            }
            let Inner {
                values,
                ops,
                requires_grad,
                grads,
                ..
            } = &mut *inner;
            let mut sink = GradSink {
                values,
                requires_grad,
                grads,
            };
            backward_op(&ops[id], id, &grad, &mut sink);
        }
        Ok(())
    }

    /// Gradient of the loss with respect to a node after [`Graph::backward`].
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let inner = self.inner.borrow();
        inner.grads[var.id]
            .as_ref()
            .map(|g| Tensor::raw(inner.values[var.id].shape().to_vec(), g.clone()))
    }

    /// Adds leaf gradients into the parameter gradient buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        let inner = self.inner.borrow();
        for &(pid, node) in &inner.leaf_params {
            if let Some(g) = &inner.grads[node] {
                let dst = &mut store.param_mut(pid).grad;
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += *s;
                }
            }
        }
    }
}

impl<T: Scalar> Inner<T> {
    fn push_arc(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> usize {
        let id = self.values.len();
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad && !self.no_grad);
        self.grads.push(None);
        id
    }
}

/// Write access to input gradients during the reverse sweep.
pub(crate) struct GradSink<'a, T: Scalar> {
    pub(crate) values: &'a [Arc<Tensor<T>>],
    requires_grad: &'a [bool],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    pub(crate) fn wants(&self, id: usize) -> bool {
        self.requires_grad[id]
    }

    /// Zero-initialized gradient buffer of `id`, or `None` if not required.
    pub(crate) fn slot(&mut self, id: usize) -> Option<&mut Vec<T>> {
        if !self.requires_grad[id] {
            return None;
        }
        let n = self.values[id].numel();
        Some(self.grads[id].get_or_insert_with(|| vec![T::zero(); n]))
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        Ref::map(self.graph.inner.borrow(), |inner| &*inner.values[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().values[self.id].shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().requires_grad[self.id]
    }

    /// The single element of a scalar node.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.value().data().to_vec()
    }
}
