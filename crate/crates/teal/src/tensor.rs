//! Dense row-major tensors with an optional gradient buffer.
//!
//! A [`Tensor`] is a cheap-to-clone handle (`Rc<RefCell<..>>`); clones share
//! storage. The autograd tape ([`crate::graph::Graph`]) holds handles to the
//! tensors an op touched, and `backward` accumulates into each handle's
//! `grad` buffer. Gradients accumulate across backward calls until
//! [`Tensor::zero_grad`] — callers own the zeroing step.

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::num::Scalar;

struct Inner<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// Shared handle to an n-dimensional array of scalars.
pub struct Tensor<S: Scalar = f32>(Rc<RefCell<Inner<S>>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> Tensor<S> {
    /// Build from explicit shape and data; `data.len()` must equal the shape product.
    pub fn from_data(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim {
                op: "tensor",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor(Rc::new(RefCell::new(Inner {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }))))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_data(shape, vec![S::zero(); numel]).expect("consistent by construction")
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_data(shape, vec![v; numel]).expect("consistent by construction")
    }

    /// Rank-0-ish scalar (shape `[1]`).
    pub fn scalar(v: S) -> Self {
        Self::from_data(&[1], vec![v]).expect("consistent by construction")
    }

    /// Normal(0, std) init. Draws f64 from the rng then narrows, so the draw
    /// sequence is identical whichever scalar type is instantiated.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<S> = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                S::of_f64(z * std)
            })
            .collect();
        Self::from_data(shape, data).expect("consistent by construction")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.0.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    /// Identity of the underlying storage; stable across clones of a handle.
    pub fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub fn same_storage(&self, other: &Tensor<S>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn data(&self) -> Ref<'_, [S]> {
        Ref::map(self.0.borrow(), |i| i.data.as_slice())
    }

    pub fn data_mut(&self) -> RefMut<'_, [S]> {
        RefMut::map(self.0.borrow_mut(), |i| i.data.as_mut_slice())
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.borrow().data.clone()
    }

    /// Overwrite contents in place (same number of elements required).
    pub fn copy_from(&self, values: &[S]) -> Result<()> {
        let mut inner = self.0.borrow_mut();
        if inner.data.len() != values.len() {
            return Err(Error::Dim {
                op: "copy_from",
                msg: format!("have {} values, got {}", inner.data.len(), values.len()),
            });
        }
        inner.data.copy_from_slice(values);
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, yes: bool) {
        self.0.borrow_mut().requires_grad = yes;
    }

    /// Current gradient, if any backward pass has written one.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.borrow().grad.clone()
    }

    /// Drop the gradient buffer. The next backward starts from zero.
    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Add `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&self, delta: &[S]) {
        let mut inner = self.0.borrow_mut();
        debug_assert_eq!(inner.data.len(), delta.len(), "gradient size");
        let grad = inner
            .grad
            .get_or_insert_with(|| vec![S::zero(); delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    /// Deep copy: fresh storage, same values, `requires_grad` preserved, no grad.
    pub fn deep_clone(&self) -> Tensor<S> {
        let inner = self.0.borrow();
        let t = Tensor::from_data(&inner.shape, inner.data.clone()).expect("same shape");
        t.set_requires_grad(inner.requires_grad);
        t
    }

    /// Convert element type (used at checkpoint boundaries, which store f32).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let inner = self.0.borrow();
        let data: Vec<T> = inner.data.iter().map(|v| T::of_f64(v.as_f64())).collect();
        let t = Tensor::from_data(&inner.shape, data).expect("same shape");
        t.set_requires_grad(inner.requires_grad);
        t
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        write!(
            f,
            "Tensor{:?} req_grad={} [{} values]",
            inner.shape,
            inner.requires_grad,
            inner.data.len()
        )
    }
}
