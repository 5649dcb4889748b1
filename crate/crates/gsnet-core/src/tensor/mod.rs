//! Dense f64 tensor with reverse-mode automatic differentiation.
//!
//! Every op that sees a grad-requiring input records a node holding its
//! parent handles and a backward closure. Nodes carry a globally increasing
//! creation id, so traversing the reachable set in descending id order
//! replays the ops in exact reverse execution order. Gradients accumulate by
//! summation, so a parameter used in several places receives the sum of all
//! its contributions.

pub mod kernels;
pub mod ops;

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{GsError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with graph recording disabled on this thread (inference mode).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    GRAD_ENABLED.with(|g| {
        let prev = g.get();
        g.set(false);
        let out = f();
        g.set(prev);
        out
    })
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward closure: given the node's parents, the gradient flowing into the
/// node, and the node's own forward output, accumulate into parent grads.
/// Closures work on raw slices through [`kernels`]; they never record ops.
type BackwardFn = Box<dyn Fn(&[Tensor], &[f64], &[f64]) + Send + Sync>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Shared handle to a tensor. Cloning is cheap; the buffer is shared.
/// Safe to hand between threads as long as it is not concurrently mutated
/// (only the optimizer and `set_data` mutate, behind locks).
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn alloc(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(GsError::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor::alloc(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::alloc(shape.to_vec(), vec![0.0; numel], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::alloc(shape.to_vec(), vec![value; numel], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::alloc(vec![], vec![value], false, None)
    }

    /// A leaf that participates in autodiff (model parameter or probe input).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(t.requires_grad_(true))
    }

    /// Return a handle to the same buffer with `requires_grad` switched.
    /// Used when promoting a data tensor to a probe target; the returned
    /// handle is a fresh leaf (no recorded history).
    pub fn requires_grad_(&self, rg: bool) -> Tensor {
        if self.inner.requires_grad == rg && self.inner.node.is_none() {
            return self.clone();
        }
        Tensor::alloc(self.inner.shape.clone(), self.to_vec(), rg, None)
    }

    /// Output of a recorded op.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        if track {
            Tensor::alloc(shape, data, true, Some(Node { parents, backward }))
        } else {
            Tensor::alloc(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Read guard over the raw buffer.
    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.inner.data.read().unwrap()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// Scalar value; panics on non-scalar (test/diagnostic convenience).
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data()[0]
    }

    /// Element at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.inner.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.inner.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range at axis {i}");
            flat = flat * ext + ix;
        }
        self.data()[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|x| x.is_finite())
    }

    /// Overwrite the buffer in place (optimizer update path).
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.inner.data.write().unwrap();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    pub(crate) fn map_data(&self, f: impl FnOnce(&mut [f64])) {
        let mut d = self.inner.data.write().unwrap();
        f(&mut d);
    }

    /// Copy of the gradient buffer, if one has been accumulated.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Detached copy: same values, no history, no grad requirement.
    pub fn detach(&self) -> Tensor {
        Tensor::alloc(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    /// True when two handles share one buffer.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Run reverse-mode autodiff from this scalar. Every grad-requiring
    /// tensor reachable through the recorded graph receives dSelf/dTensor,
    /// summed over all uses. The seed gradient is 1.0.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(GsError::Input(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let order = Graph::trace(self);
        self.accumulate_grad(&[1.0]);
        for t in &order {
            let inner = &t.inner;
            let Some(node) = inner.node.as_ref() else {
                continue;
            };
            let grad = inner.grad.lock().unwrap().clone();
            let Some(grad) = grad else { continue };
            let out = inner.data.read().unwrap();
            (node.backward)(&node.parents, &grad, &out);
        }
        Ok(())
    }
}

/// The traced graph of one backward pass: the reachable grad-requiring
/// tensors in reverse execution order.
struct Graph;

impl Graph {
    fn trace(loss: &Tensor) -> Vec<Tensor> {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![loss.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.inner.requires_grad || !seen.insert(t.inner.id) {
                continue;
            }
            if let Some(node) = t.inner.node.as_ref() {
                for p in &node.parents {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        // Creation ids increase monotonically along execution, so descending
        // id order is exact reverse execution order and every consumer is
        // processed before its producers.
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));
        nodes
    }
}
