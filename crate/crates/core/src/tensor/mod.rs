//! Reverse-mode autodiff tensors.
//!
//! Tensors are immutable row-major buffers behind `Rc`. Operations on tracked
//! tensors record a graph node holding the operands; `backward` on a scalar
//! walks the graph once in reverse topological order and sums gradient
//! contributions into every tracked tensor it reaches. Graphs are rebuilt on
//! every forward pass, so control flow in model code needs no special casing.

mod backward;
pub mod gradcheck;
pub(crate) mod layout;
mod ops;
pub mod params;
pub mod scalar;

pub use params::ParamStore;
pub use scalar::Scalar;

use crate::error::{Error, Result};
use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

/// Runs `f` without recording graph nodes (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(self.0));
        }
    }
    let _restore = NO_GRAD.with(|c| {
        let prev = c.get();
        c.set(true);
        Restore(prev)
    });
    f()
}

/// Graph node: the operation that produced a tensor, holding its operands and
/// whatever forward-pass context the backward rule needs.
pub(crate) enum Node<E: Scalar> {
    MatMul { a: Tensor<E>, b: Tensor<E>, trans_b: bool },
    Add { a: Tensor<E>, b: Tensor<E> },
    Sub { a: Tensor<E>, b: Tensor<E> },
    Mul { a: Tensor<E>, b: Tensor<E> },
    Scale { x: Tensor<E>, c: E },
    Gelu { x: Tensor<E> },
    Sigmoid { x: Tensor<E> },
    SoftmaxLast { x: Tensor<E> },
    LayerNorm { x: Tensor<E>, gamma: Tensor<E>, beta: Tensor<E>, mean: Vec<E>, rstd: Vec<E> },
    SumAll { x: Tensor<E> },
    Reshape { x: Tensor<E> },
    Permute { x: Tensor<E>, axes: Vec<usize> },
    Roll { x: Tensor<E>, shifts: Vec<isize> },
    PadEnd { x: Tensor<E> },
    Slice { x: Tensor<E>, starts: Vec<usize> },
    GatherRows { table: Tensor<E>, idx: Rc<Vec<usize>> },
}

struct Inner<E: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<E>>>,
    grad: RefCell<Option<Vec<E>>>,
    node: Option<Node<E>>,
    requires_grad: bool,
}

pub struct Tensor<E: Scalar> {
    inner: Rc<Inner<E>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Scalar> Tensor<E> {
    fn validate_shape(shape: &[usize]) -> Result<()> {
        if shape.is_empty() {
            return Err(Error::shape("tensor rank must be at least 1"));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("all extents must be positive, got {shape:?}")));
        }
        Ok(())
    }

    fn make(shape: Vec<usize>, data: Rc<RefCell<Vec<E>>>, node: Option<Node<E>>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                grad: RefCell::new(None),
                node,
                requires_grad,
            }),
        }
    }

    /// New op output; the node is kept only while gradients are enabled and
    /// some operand is tracked.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<E>, node: Node<E>, tracked: bool) -> Self {
        debug_assert_eq!(layout::numel(&shape), data.len());
        let tracked = tracked && grad_enabled();
        Self::make(
            shape,
            Rc::new(RefCell::new(data)),
            if tracked { Some(node) } else { None },
            tracked,
        )
    }

    /// Op output that reuses the operand's buffer (pure reindexing).
    pub(crate) fn from_view(shape: Vec<usize>, data: Rc<RefCell<Vec<E>>>, node: Node<E>, tracked: bool) -> Self {
        let tracked = tracked && grad_enabled();
        Self::make(shape, data, if tracked { Some(node) } else { None }, tracked)
    }

    /// Untracked constant.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        Self::validate_shape(shape)?;
        if layout::numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                layout::numel(shape),
                data.len()
            )));
        }
        Ok(Self::make(shape.to_vec(), Rc::new(RefCell::new(data)), None, false))
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, vec![E::ZERO; layout::numel(shape)])
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Self> {
        Self::from_vec(shape, vec![E::from_f64(v); layout::numel(shape)])
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(&[1], vec![E::from_f64(v)]).expect("scalar shape is valid")
    }

    /// Tracked leaf (trainable parameter).
    pub fn param(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        // Rc is unique here, so rebuilding with the flag set is cheap.
        Ok(Self::make(
            t.inner.shape.clone(),
            Rc::clone(&t.inner.data),
            None,
            true,
        ))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        layout::numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn node(&self) -> Option<&Node<E>> {
        self.inner.node.as_ref()
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().iter().map(|v| v.to_f64()).collect()
    }

    /// Sole element of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() needs a single-element tensor, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Overwrites the buffer in place. Meant for leaves (optimizer updates,
    /// gradient-check perturbations); reindexing views share buffers, so
    /// writing through a non-leaf is a contract violation.
    pub fn set_data(&self, new: &[E]) -> Result<()> {
        if new.len() != self.numel() {
            return Err(Error::contract(format!(
                "set_data length {} does not match {} elements",
                new.len(),
                self.numel()
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(new);
        Ok(())
    }

    /// Applies `f` to every element in place (leaves only, see `set_data`).
    pub fn map_data_mut(&self, f: impl FnMut(&mut E)) {
        self.inner.data.borrow_mut().iter_mut().for_each(f);
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same buffer, no graph history, untracked.
    pub fn detach(&self) -> Tensor<E> {
        Self::make(self.inner.shape.clone(), Rc::clone(&self.inner.data), None, false)
    }

    pub(crate) fn accumulate_grad(&self, f: impl FnOnce(&mut [E])) {
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![E::ZERO; self.numel()]);
        f(buf);
    }

    pub(crate) fn take_grad_for_backward(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub(crate) fn seed_grad_one(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![E::ONE; 1]);
    }

    /// Reverse-mode sweep from a scalar. Gradients sum into every tracked
    /// tensor reachable from `self`; leaves keep theirs until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        backward::run_backward(self)
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
