//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) to a node holding its values, an
//! optional gradient buffer and, for results of differentiable operations,
//! the operation that produced it. Calling [`Tensor::backward`] on a scalar
//! walks that graph once in reverse topological order and accumulates
//! gradients into every leaf created with `requires_grad`.
//!
//! The element type is generic over [`Float`] so the same model code runs in
//! single precision for training and double precision for gradient checks.

mod backward;
pub mod flops;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub(crate) use ops::Op;

/// Scalar element type of a tensor.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Size of one element in bytes.
    const BYTES: usize;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

impl Float for f32 {
    const BYTES: usize = 4;
}

impl Float for f64 {
    const BYTES: usize = 8;
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any differentiation graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

pub(crate) struct Node<T: Float> {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    op: Option<Op<T>>,
}

pub struct Tensor<T: Float = f32> {
    node: Rc<Node<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.node.data.borrow();
        let preview: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Float> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Result of an operation; records `op` only when some input needs a gradient.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        if grad_enabled() && op.inputs().iter().any(|t| t.requires_grad()) {
            Self::build(shape, data, true, Some(op))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    /// Constant tensor; fails if `data` does not fill `shape`.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_len(&data, shape)?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_len(&data, shape)?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![T::zero(); shape.iter().product()], false, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Vec::new(), vec![v], false, None)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), (0..n).map(&mut f).collect(), false, None)
    }

    /// Samples `N(0, std²)` entries as a trainable leaf.
    pub fn randn_param<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self::build(shape.to_vec(), data, true, None)
    }

    /// Constant copy of the current values, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.node.shape.clone(), self.to_vec(), false, None)
    }

    /// Same values re-wrapped as a fresh trainable leaf.
    pub fn to_param(&self) -> Self {
        Self::build(self.node.shape.clone(), self.to_vec(), true, None)
    }

    pub fn id(&self) -> usize {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        let data = self.node.data.borrow();
        assert_eq!(data.len(), 1, "item() on tensor of shape {:?}", self.node.shape);
        data[0]
    }

    pub fn at(&self, index: usize) -> T {
        self.node.data.borrow()[index]
    }

    /// `(rows, cols)` of a matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.node.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::Contract(format!(
                "expected a matrix, got shape {:?}",
                self.node.shape
            ))),
        }
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Mutable access to the gradient buffer, if one has been accumulated.
    pub fn with_grad_mut<R>(&self, f: impl FnOnce(&mut [T]) -> R) -> Option<R> {
        self.node.grad.borrow_mut().as_deref_mut().map(f)
    }

    /// In-place update of the values. Intended for leaves (optimizer steps, weight surgery).
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.node.data.borrow_mut());
    }

    pub fn set_data(&self, values: &[T]) -> Result<()> {
        let mut data = self.node.data.borrow_mut();
        if data.len() != values.len() {
            return Err(Error::Shape {
                op: "set_data",
                lhs: self.node.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        data.copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn op(&self) -> Option<&Op<T>> {
        self.node.op.as_ref()
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Converts element type, producing a leaf with the same trainability.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let data = self
            .node
            .data
            .borrow()
            .iter()
            .map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN)))
            .collect();
        Tensor::build(self.node.shape.clone(), data, self.node.requires_grad && self.op().is_none(), None)
    }
}

fn check_len<T>(data: &[T], shape: &[usize]) -> Result<()> {
    let want: usize = shape.iter().product();
    if want != data.len() {
        return Err(Error::Shape {
            op: "tensor construction",
            lhs: shape.to_vec(),
            rhs: vec![data.len()],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests;
