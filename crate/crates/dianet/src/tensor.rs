//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) to a flat `Vec<f64>` plus shape.
//! Differentiable operations record a backward closure and keep handles to
//! their inputs, so the live graph is exactly the set of tensors reachable
//! from the loss. Calling [`Tensor::backward`] on a scalar walks that graph
//! in reverse creation order and accumulates gradients into every reachable
//! leaf that was marked with `requires_grad`.
//!
//! All computation is in f64. Layout convention throughout the crate is
//! (batch, channel, height, width), row-major.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Node {
    pub parents: Vec<Tensor>,
    /// Receives the output gradient and accumulates into the parents.
    pub backward: Box<dyn Fn(&[f64])>,
}

pub(crate) struct Inner {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    /// Leaf marker: gradients are retained here across backward calls.
    pub requires_grad: bool,
    /// True when this tensor, or anything upstream of it, requires grad.
    pub needs_grad: bool,
    pub op: Option<Node>,
}

/// Shared handle to a tensor value; clones alias the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("id", &inner.id)
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data,
                grad: None,
                requires_grad: false,
                needs_grad: false,
                op: None,
            })),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![1.0; shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_vec(vec![value; shape.iter().product()], shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![value], &[1])
    }

    /// Marks this tensor as a trainable leaf and returns it.
    pub fn requires_grad(self) -> Tensor {
        {
            let mut inner = self.inner.borrow_mut();
            assert!(inner.op.is_none(), "requires_grad is only valid on leaves");
            inner.requires_grad = true;
            inner.needs_grad = true;
        }
        self
    }

    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) + 'static,
    ) -> Tensor {
        let numel: usize = shape.iter().product();
        debug_assert_eq!(data.len(), numel);
        let needs_grad = parents.iter().any(|p| p.needs_grad());
        let op = if needs_grad {
            Some(Node {
                parents,
                backward: Box::new(backward),
            })
        } else {
            None
        };
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: None,
                requires_grad: false,
                needs_grad,
                op,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.inner.borrow(), |i| &i.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    /// Replaces the stored values. Length must match; the graph is untouched.
    pub fn set_data(&self, values: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), values.len(), "set_data length mismatch");
        inner.data.copy_from_slice(values);
    }

    /// Adds `delta` to one element (finite-difference probes).
    pub fn nudge(&self, index: usize, delta: f64) {
        self.inner.borrow_mut().data[index] += delta;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        if let Some(g) = inner.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.borrow().op.is_none()
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.borrow().needs_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    /// Accumulates `delta` into this tensor's gradient buffer.
    pub(crate) fn accum_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.needs_grad {
            return;
        }
        let n = inner.data.len();
        debug_assert_eq!(delta.len(), n);
        let g = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Mutates data in place through a closure (optimizer updates).
    pub(crate) fn with_data_mut(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().data);
    }

    pub(crate) fn with_grad_mut(&self, f: impl FnOnce(&mut Option<Vec<f64>>)) {
        f(&mut self.inner.borrow_mut().grad);
    }

    /// Reverse-mode gradient accumulation from a scalar root.
    ///
    /// Gradients of interior nodes are recomputed from scratch on every call;
    /// leaf gradients accumulate, so two backward calls without zeroing
    /// double them exactly.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.needs_grad() {
            return Err(Error::Usage(
                "backward root is not connected to any tensor requiring grad".into(),
            ));
        }

        // Collect the reachable subgraph. Node ids grow monotonically as the
        // graph is built, so descending id order is a valid reverse
        // topological order.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            let id = t.id();
            if !seen.insert(id) {
                continue;
            }
            {
                let inner = t.inner.borrow();
                if let Some(op) = &inner.op {
                    for p in &op.parents {
                        if p.needs_grad() {
                            stack.push(p.clone());
                        }
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));

        // Reset interior gradients; leaves keep their accumulators.
        for t in &nodes {
            let mut inner = t.inner.borrow_mut();
            if inner.op.is_some() {
                let n = inner.data.len();
                match inner.grad.as_mut() {
                    Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                    None => inner.grad = Some(vec![0.0; n]),
                }
            }
        }
        self.accum_grad_force(&[1.0]);

        for t in &nodes {
            let inner = t.inner.borrow();
            if let (Some(op), Some(g)) = (&inner.op, &inner.grad) {
                (op.backward)(g);
            }
        }
        Ok(())
    }

    /// Like `accum_grad` but also seeds leaves that are the backward root.
    fn accum_grad_force(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let g = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}
