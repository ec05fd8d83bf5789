//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation; [`Var`] is a handle to one recorded
//! value. Calling [`Var::backward`] on a scalar walks the tape once in
//! reverse creation order and deposits gradients on every node that
//! requires them. A tape belongs to one logical thread; independent tapes
//! may run in parallel.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

mod conv;
mod elementwise;
pub mod gradcheck;
mod linalg;
mod reduce;
mod scan;
mod shape;

pub use conv::ConvAxis;
pub use scan::{a_rss_scan, ScanMode};

/// One reverse-pass contribution: reads the output gradient, accumulates
/// into parent gradients through the sink.
pub(crate) trait BackwardOp<T: Scalar> {
    fn apply(&self, grad_out: &Tensor<T>, sink: &mut GradSink<'_, T>);
}

pub(crate) struct Node<T: Scalar> {
    backward: Option<Box<dyn BackwardOp<T>>>,
    needs_grad: bool,
    grad: Option<Tensor<T>>,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    swept: bool,
}

/// Recording tape. Cheap to clone (shared handle).
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), swept: false })),
        }
    }

    /// Register an input tensor.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        self.push(value, None, requires_grad)
    }

    /// Register a constant (no gradient flows into it).
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: T) -> Var<T> {
        self.constant(Tensor::scalar(v))
    }

    pub(crate) fn push(
        &self,
        value: Tensor<T>,
        backward: Option<Box<dyn BackwardOp<T>>>,
        needs_grad: bool,
    ) -> Var<T> {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced on the tape"
        );
        let value = Arc::new(value);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            backward: if needs_grad { backward } else { None },
            needs_grad,
            grad: None,
        });
        drop(inner);
        Var { tape: self.clone(), id, value, needs_grad }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clear all stored gradients so backward can run again.
    pub fn reset_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.swept = false;
        for n in inner.nodes.iter_mut() {
            n.grad = None;
        }
    }

    fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Gradient accumulation view handed to backward ops.
pub(crate) struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<Tensor<T>>],
    needs: &'a [bool],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    /// True when node `id` participates in differentiation.
    pub fn wants(&self, id: usize) -> bool {
        self.needs[id]
    }

    /// Mutable gradient buffer for node `id`, lazily zero-initialised.
    /// Returns `None` when the node does not require a gradient.
    pub fn entry(&mut self, id: usize, shape: &[usize]) -> Option<&mut Tensor<T>> {
        if !self.needs[id] {
            return None;
        }
        Some(self.grads[id].get_or_insert_with(|| Tensor::zeros(shape.to_vec())))
    }

    /// Accumulate a ready-made contribution of the node's exact shape.
    pub fn add(&mut self, id: usize, contribution: Tensor<T>) {
        if let Some(g) = self.entry(id, contribution.shape()) {
            g.add_assign(&contribution);
        }
    }
}

/// Handle to a tensor recorded on a tape.
pub struct Var<T: Scalar> {
    tape: Tape<T>,
    id: usize,
    value: Arc<Tensor<T>>,
    needs_grad: bool,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            tape: self.tape.clone(),
            id: self.id,
            value: Arc::clone(&self.value),
            needs_grad: self.needs_grad,
        }
    }
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_arc(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.needs_grad
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    /// Gradient deposited by the last [`Var::backward`] run.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub(crate) fn check_same_tape(&self, other: &Var<T>) -> Result<()> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::invalid(
                "operands were recorded on different tapes",
            ));
        }
        Ok(())
    }

    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        backward: Option<Box<dyn BackwardOp<T>>>,
        needs_grad: bool,
    ) -> Var<T> {
        self.tape.push(value, backward, needs_grad)
    }

    /// Reverse pass from a scalar. Populates gradients of every
    /// `requires_grad` node reachable from this one. Running twice without
    /// [`Tape::reset_grads`] is an error.
    pub fn backward(&self) -> Result<()> {
        if self.value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        let mut inner = self.tape.inner.borrow_mut();
        if inner.swept {
            return Err(Error::invalid(
                "backward called twice without reset_grads",
            ));
        }
        inner.swept = true;
        if !self.needs_grad {
            return Ok(()); // constant graph: nothing to do
        }

        let n = inner.nodes.len();
        let needs: Vec<bool> = inner.nodes.iter().map(|n| n.needs_grad).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[self.id] = Some(Tensor::full(self.shape().to_vec(), T::one()));

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(op) = inner.nodes[id].backward.take() {
                let mut sink = GradSink { grads: &mut grads, needs: &needs };
                op.apply(&g, &mut sink);
                inner.nodes[id].backward = Some(op);
            }
            inner.nodes[id].grad = Some(g);
        }
        Ok(())
    }
}
