//! Dense tensors with reverse-mode gradients.
//!
//! Forward ops record a graph node when gradients are enabled and at least one
//! input is tracked; `backward` walks the recorded graph in reverse topological
//! order. Gradient flow through intermediate nodes uses transient buffers, so
//! repeated `backward` calls on the same loss accumulate into leaf `grad`
//! slots only (calling twice exactly doubles every parameter gradient).
//!
//! Every op validates its output for NaN/Inf and fails loudly instead of
//! letting non-finite values propagate.

mod checkpoint;
mod ops;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{clip_grad_value, scale_grads, zero_grads, Adam};

use crate::error::{Error, Result};
use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

thread_local! {
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Runs `f` with gradient recording disabled on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
        }
    }
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let _guard = Guard;
    f()
}

fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get()) == 0
}

/// Gradient contributions to each parent, aligned with the parent list.
type ParentGrads = Vec<Option<Vec<f64>>>;
type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor]) -> ParentGrads>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// A dense multi-dimensional real array with an optional gradient slot.
///
/// `Tensor` is a cheap-to-clone shared handle; clones alias the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op,
                detail: format!("value {v} at flat index {i}"),
            });
        }
    }
    Ok(())
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::invalid("tensor shape must have at least one extent"));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::invalid(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a plain (untracked) tensor. Fails on zero extents or a
    /// shape/data length mismatch.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel = validate_shape(shape)?;
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                grad: None,
                requires_grad: false,
                node: None,
            })),
        })
    }

    /// Builds a trainable leaf (requires_grad set).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let numel = validate_shape(shape)?;
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        let numel = validate_shape(shape)?;
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(&[1], vec![value]).expect("scalar construction cannot fail")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Copy of the tensor's values in row-major order.
    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Copy of the gradient, if populated.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.borrow_mut().requires_grad = value;
    }

    /// True when this tensor participates in gradient flow (trainable leaf or
    /// op output).
    pub fn is_tracked(&self) -> bool {
        let inner = self.inner.borrow();
        inner.requires_grad || inner.node.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() requires a scalar tensor");
        inner.data[0]
    }

    /// Overwrites the stored values in place (used by the optimizer; the
    /// recorded graph, if any, is not invalidated on leaves).
    pub(crate) fn set_data(&self, data: Vec<f64>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len());
        inner.data = data;
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Replaces the gradient wholesale.
    pub fn set_grad(&self, grad: Vec<f64>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), grad.len());
        inner.grad = Some(grad);
    }

    fn ptr(&self) -> *const Inner {
        self.inner.as_ptr()
    }

    /// Detached copy: same values, no graph, not trainable.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::new(&inner.shape, inner.data.clone()).expect("detach preserves a valid shape")
    }

    pub(crate) fn make_result(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        check_finite(op, &data)?;
        let track = grad_enabled() && parents.iter().any(Tensor::is_tracked);
        let node = track.then_some(Node { parents, backward });
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                requires_grad: false,
                node,
            })),
        })
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const Inner> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, processed)) = stack.pop() {
        if processed {
            order.push(t);
            continue;
        }
        if !visited.insert(t.ptr()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.inner.borrow().node {
            for p in &node.parents {
                if !visited.contains(&p.ptr()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Reverse-mode pass from a scalar loss.
///
/// Populates `grad` on every reachable tensor with `requires_grad`; gradient
/// flow through intermediates is transient and not retained between calls.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::invalid(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let order = topo_order(loss);
    let mut flow: HashMap<*const Inner, Vec<f64>> = HashMap::new();
    flow.insert(loss.ptr(), vec![1.0]);

    for t in order.iter().rev() {
        let Some(out_grad) = flow.remove(&t.ptr()) else {
            continue;
        };
        check_finite("backward", &out_grad)?;
        if t.requires_grad() {
            t.accumulate_grad(&out_grad);
        }
        let inner = t.inner.borrow();
        if let Some(node) = &inner.node {
            let contribs = (node.backward)(&inner.data, &out_grad, &node.parents);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (parent, contrib) in node.parents.iter().zip(contribs) {
                let Some(contrib) = contrib else { continue };
                if !parent.is_tracked() {
                    continue;
                }
                let entry = flow
                    .entry(parent.ptr())
                    .or_insert_with(|| vec![0.0; parent.numel()]);
                for (e, c) in entry.iter_mut().zip(&contrib) {
                    *e += c;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
