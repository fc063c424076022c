//! The minimal deterministic N x C x H x W tensor with reverse-mode
//! automatic differentiation.
//!
//! Tensors are immutable once produced by an op; the only in-place writes
//! are optimizer updates and checkpoint loads on leaf parameters. The
//! graph is a DAG of `Rc` nodes: each op output holds its parents and a
//! backward closure that scatters the output gradient into them.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense 4-D shape: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn scalar() -> Shape {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// True while gradient recording is on for this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// RAII guard that disables graph recording until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> NoGradGuard {
        let prev = GRAD_ENABLED.with(|c| c.replace(false));
        NoGradGuard { prev }
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|c| c.set(prev));
    }
}

type BackwardFn = Box<dyn Fn(&[f32], &[Tensor])>;

struct TensorInner {
    id: u64,
    shape: Shape,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    // Exact f64 value for scalar tensors produced by reductions and the
    // scalar arithmetic composed on top of them. Keeps loss readouts at
    // full precision for finite-difference checks.
    fval: Cell<Option<f64>>,
}

/// Handle to a shared tensor node. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={}, grad={})",
            self.inner.id,
            self.inner.shape,
            self.inner.requires_grad.get()
        )
    }
}

impl Tensor {
    fn leaf(shape: Shape, data: Vec<f32>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor {
            inner: Rc::new(TensorInner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                parents: Vec::new(),
                backward: None,
                fval: Cell::new(None),
            }),
        }
    }

    /// Constant leaf tensor (no gradient tracking).
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Tensor> {
        if data.len() != shape.numel() {
            return Err(Error::Config(format!(
                "tensor data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor::leaf(shape, data, false))
    }

    /// Leaf tensor that accumulates gradients (a trainable value).
    pub fn variable(shape: Shape, data: Vec<f32>) -> Result<Tensor> {
        if data.len() != shape.numel() {
            return Err(Error::Config(format!(
                "tensor data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor::leaf(shape, data, true))
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::leaf(shape, vec![0.0; shape.numel()], false)
    }

    pub fn full(shape: Shape, value: f32) -> Tensor {
        Tensor::leaf(shape, vec![value; shape.numel()], false)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::leaf(Shape::scalar(), vec![value], false)
    }

    /// Op-output constructor. Records the graph edge only while gradient
    /// mode is on and at least one parent is tracked.
    pub(crate) fn from_op(
        shape: Shape,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(data.len(), shape.numel());
        let tracked = grad_enabled() && parents.iter().any(|p| p.is_tracked());
        if tracked {
            Tensor {
                inner: Rc::new(TensorInner {
                    id: next_id(),
                    shape,
                    data: RefCell::new(data),
                    grad: RefCell::new(None),
                    requires_grad: Cell::new(true),
                    parents,
                    backward: Some(backward),
                    fval: Cell::new(None),
                }),
            }
        } else {
            Tensor::leaf(shape, data, false)
        }
    }

    fn is_tracked(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Flip gradient tracking on a leaf (used to freeze pretrained weights).
    pub fn set_requires_grad(&self, on: bool) {
        self.inner.requires_grad.set(on);
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    /// Scalar value at f64 precision when the producing op recorded one
    /// (reductions and scalar arithmetic do); the f32 value otherwise.
    pub fn item_f64(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner
            .fval
            .get()
            .unwrap_or_else(|| self.inner.data.borrow()[0] as f64)
    }

    pub(crate) fn set_fval(&self, v: f64) {
        debug_assert_eq!(self.numel(), 1);
        self.inner.fval.set(Some(v));
    }

    /// Overwrite the values of a leaf tensor in place (optimizer updates,
    /// checkpoint loads, finite-difference probes).
    pub fn set_data(&self, values: &[f32]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Config(format!(
                "set_data length {} does not match shape {}",
                values.len(),
                self.shape()
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Mutate the raw values in place through a closure.
    pub fn update_data<F: FnOnce(&mut [f32])>(&self, f: F) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Add `delta` into this tensor's gradient buffer (allocated lazily).
    /// No-op for untracked tensors, so backward closures can call it
    /// unconditionally on every parent.
    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        if !self.is_tracked() {
            return;
        }
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        for (gi, di) in g.iter_mut().zip(delta.iter()) {
            *gi += di;
        }
    }

    /// Same as [`accumulate_grad`](Self::accumulate_grad) but hands the
    /// closure a zero-initialized (or partially filled) buffer to write
    /// into directly, avoiding a temporary.
    pub(crate) fn with_grad_mut<F: FnOnce(&mut [f32])>(&self, f: F) {
        if !self.is_tracked() {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        f(g);
    }

    /// A constant copy of this tensor, cut out of the graph.
    pub fn detach(&self) -> Tensor {
        let t = Tensor::leaf(self.shape(), self.data().clone(), false);
        t.inner.fval.set(self.inner.fval.get());
        t
    }

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into
    /// every tracked tensor reachable through the graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Invariant(format!(
                "backward requires a scalar output, got shape {}",
                self.shape()
            )));
        }
        if !self.is_tracked() {
            return Err(Error::Invariant(
                "backward on a tensor with no recorded graph".into(),
            ));
        }

        // Iterative post-order DFS over parent edges; reverse post-order is
        // a topological order, so every node's grad is complete before its
        // backward closure runs.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, i)) = stack.pop() {
            if i < t.inner.parents.len() {
                stack.push((t.clone(), i + 1));
                let p = &t.inner.parents[i];
                if p.inner.backward.is_some() && !visited.contains(&p.id()) {
                    visited.insert(p.id());
                    stack.push((p.clone(), 0));
                }
            } else {
                order.push(t);
            }
        }

        self.inner.grad.replace(Some(vec![1.0]));
        for t in order.iter().rev() {
            let Some(back) = &t.inner.backward else {
                continue;
            };
            let grad_ref = t.inner.grad.borrow();
            if let Some(g) = grad_ref.as_ref() {
                back(g, &t.inner.parents);
            }
        }
        Ok(())
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmath::ops;

    #[test]
    fn leaf_roundtrip_and_shape_check() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.data()[2], 3.0);
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0]).is_err());
    }

    #[test]
    fn backward_through_shared_subgraph() {
        // y = sum(x * x) => dy/dx = 2x, with x appearing twice as a parent.
        let x = Tensor::variable(Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 3.0]).unwrap();
        let y = ops::sum(&ops::mul(&x, &x).unwrap());
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn no_grad_guard_suppresses_graph() {
        let x = Tensor::variable(Shape::scalar(), vec![2.0]).unwrap();
        let y = {
            let _g = NoGradGuard::new();
            ops::mul(&x, &x).unwrap()
        };
        assert!(!y.requires_grad());
        assert!(y.backward().is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::variable(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let y = ops::mul(&x, &x).unwrap();
        assert!(y.backward().is_err());
    }
}
