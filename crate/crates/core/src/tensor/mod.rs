//! Dense tensor substrate with reverse-mode gradients.
//!
//! A [`Tensor`] is an n-dimensional row-major array of `f32` or `f64` values.
//! Every operation that consumes tensors which (transitively) require
//! gradients records a backward closure; calling [`Tensor::backward`] on a
//! scalar walks the recorded graph in reverse topological order and
//! accumulates gradients into every reachable leaf. The graph is rebuilt on
//! each forward pass and freed when the output tensor is dropped.

mod element;
pub mod gradcheck;
pub mod io;
pub mod ops;
pub mod optim;

pub(crate) mod conv_impl;

pub use element::{Dtype, Element};
pub use gradcheck::grad_check;
pub use optim::{adam_step, zero_grad, AdamConfig, Parameter};

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch on {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: expected {rank}-d tensor, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        rank: usize,
        got: Vec<usize>,
    },
    #[error("conv2d: input channels {cin} not divisible by groups {groups}")]
    GroupsIndivisible { cin: usize, groups: usize },
    #[error("{op}: kernel {k}x{k2} with padding {pad} does not fit input {h}x{w}")]
    KernelTooLarge {
        op: &'static str,
        k: usize,
        k2: usize,
        pad: usize,
        h: usize,
        w: usize,
    },
    #[error("backward requires a scalar, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("backward already ran on this tensor; rebuild the graph before calling again")]
    BackwardTwice,
    #[error("parameter '{0}' has no gradient; run backward first")]
    MissingGrad(String),
    #[error("{op}: value {value} outside required domain {domain}")]
    DomainError {
        op: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("computation is not deterministic: two forward passes disagreed")]
    NonDeterministic,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

type BackwardFn<E> = Box<dyn Fn(&Tensor<E>)>;

struct Inner<E: Element> {
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<E>>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
    backward_ran: Cell<bool>,
}

/// Cheaply clonable handle onto a tensor node; clones share storage and
/// gradient state.
pub struct Tensor<E: Element> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    /// Leaf tensor that does not participate in gradient computation.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data: Rc::new(RefCell::new(data)),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
                backward_ran: Cell::new(false),
            }),
        }
    }

    /// Leaf tensor that accumulates a gradient during backward.
    pub fn variable(data: Vec<E>, shape: &[usize]) -> Self {
        let t = Self::from_vec(data, shape);
        Tensor {
            inner: Rc::new(Inner {
                shape: t.inner.shape.clone(),
                data: Rc::clone(&t.inner.data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents: Vec::new(),
                backward: None,
                backward_ran: Cell::new(false),
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(vec![E::zero(); shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self::from_vec(vec![value; shape.iter().product()], shape)
    }

    pub fn scalar(value: E) -> Self {
        Self::from_vec(vec![value], &[1])
    }

    /// Internal op constructor: ties the output to its parents and records
    /// the backward closure when any parent requires a gradient.
    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Tensor<E>>,
        backward: impl Fn(&Tensor<E>) + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "op produced a non-finite value"
        );
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        let (parents, backward): (Vec<_>, Option<BackwardFn<E>>) = if requires_grad {
            (parents, Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: Rc::new(RefCell::new(data)),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
                backward_ran: Cell::new(false),
            }),
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

    /// Borrow of the value buffer. Callers must not hold this across a
    /// mutation of the same tensor.
    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// Overwrite the value buffer in place (used by the optimizer and tests).
    pub fn set_data(&self, values: &[E]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len());
        d.copy_from_slice(values);
    }

    pub(crate) fn map_data(&self, f: impl FnMut(&mut E)) {
        self.inner.data.borrow_mut().iter_mut().for_each(f);
    }

    /// The (N, C, H, W) extents of a 4-d tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.inner.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::RankMismatch {
                op,
                rank: 4,
                got: self.inner.shape.clone(),
            }),
        }
    }

    /// Current gradient, if one has been accumulated.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn set_grad_zero(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![E::zero(); self.numel()]);
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[E]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += *v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Leaf view of the same storage, cut off from the recorded graph.
    pub fn detach(&self) -> Tensor<E> {
        Tensor {
            inner: Rc::new(Inner {
                shape: self.inner.shape.clone(),
                data: Rc::clone(&self.inner.data),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
                backward_ran: Cell::new(false),
            }),
        }
    }

    /// Reverse-mode sweep from a scalar. Populates gradients on every
    /// reachable tensor that requires one.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward(self.inner.shape.clone()));
        }
        if self.inner.backward_ran.get() {
            return Err(TensorError::BackwardTwice);
        }
        self.inner.backward_ran.set(true);

        // Iterative post-order DFS over parents, identity by node address.
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited: HashSet<*const Inner<E>> = HashSet::new();
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.inner));
        while let Some((node, child)) = stack.pop() {
            if child < node.inner.parents.len() {
                let next = node.inner.parents[child].clone();
                stack.push((node, child + 1));
                if visited.insert(Rc::as_ptr(&next.inner)) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }

        self.accumulate_grad(&[E::one()]);
        for node in order.iter().rev() {
            if !node.inner.requires_grad {
                continue;
            }
            if let Some(f) = &node.inner.backward {
                let has_grad = node.inner.grad.borrow().is_some();
                if has_grad {
                    f(node);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip() {
        let t = Tensor::from_vec(vec![1.0f32, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(!t.requires_grad());
    }

    #[test]
    fn backward_on_nonscalar_errors() {
        let t = Tensor::<f64>::variable(vec![1.0, 2.0], &[2]);
        assert!(matches!(
            t.backward(),
            Err(TensorError::NonScalarBackward(_))
        ));
    }

    #[test]
    fn backward_twice_errors() {
        let w = Tensor::<f64>::variable(vec![2.0], &[1]);
        let x = Tensor::from_vec(vec![3.0], &[1]);
        let loss = w.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![3.0]);
        assert!(matches!(loss.backward(), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn linear_gradient() {
        // loss = w * x with x = [3], w = [2] -> dL/dw = 3
        let w = Tensor::<f64>::variable(vec![2.0], &[1]);
        let x = Tensor::from_vec(vec![3.0], &[1]);
        let loss = w.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn chain_rule_sigmoid_square() {
        // loss = sigmoid(w)^2 at w = 0 -> dL/dw = 2 * 0.5 * 0.25 = 0.25
        let w = Tensor::<f64>::variable(vec![0.0], &[1]);
        let s = w.sigmoid();
        let loss = s.mul(&s).unwrap().sum();
        loss.backward().unwrap();
        let g = w.grad().unwrap()[0];
        assert!((g - 0.25).abs() < 1e-12, "got {g}");
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        // loss = x*x + x -> dL/dx = 2x + 1
        let x = Tensor::<f64>::variable(vec![3.0], &[1]);
        let loss = x.mul(&x).unwrap().add(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::<f64>::variable(vec![2.0], &[1]);
        let d = x.mul(&x).unwrap().detach();
        let loss = d.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        // Only the direct factor contributes: d(4*x)/dx = 4.
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }
}
