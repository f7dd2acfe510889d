//! Dense f32/f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable value carriers (optimizer updates between steps are
//! the one sanctioned mutation) and may be shared across threads. A [`Graph`]
//! is the gradient tape: it is rebuilt for every forward pass (define-by-run)
//! and is confined to a single thread. Ops record a backward closure on the
//! tape only when gradient tracking is on and at least one input requires
//! grad, so a forward over purely frozen tensors allocates no gradients.

use std::cell::RefCell;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

mod conv;
pub mod cst;
mod gradcheck;
pub mod ops;

pub use gradcheck::{grad_check, grad_check_param, grad_check_sampled};

/// Scalar element type of the engine. `f32` is the production dtype; `f64`
/// is the shadow dtype used by the op-level test suite.
pub trait Elem:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self;
    /// Standard normal CDF, evaluated through f64 for full precision.
    fn gauss_cdf(self) -> Self {
        let x = self.as_f64();
        Self::from_f64(0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)))
    }
    /// Standard normal PDF.
    fn gauss_pdf(self) -> Self {
        let x = self.as_f64();
        Self::from_f64((-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
    }
}

impl Elem for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        use rand_distr::Distribution;
        rand_distr::StandardNormal.sample(rng)
    }
}

impl Elem for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        use rand_distr::Distribution;
        rand_distr::StandardNormal.sample(rng)
    }
}

struct Inner<E> {
    shape: Vec<usize>,
    data: RwLock<Vec<E>>,
    requires_grad: AtomicBool,
    grad: Mutex<Option<Vec<E>>>,
}

/// An n-dimensional row-major value array. Cloning is cheap (shared storage).
pub struct Tensor<E: Elem = f32>(Arc<Inner<E>>);

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<E: Elem> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.0.shape,
            self.requires_grad()
        )
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Elem> Tensor<E> {
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor(Arc::new(Inner {
            shape: shape.to_vec(),
            data: RwLock::new(data),
            requires_grad: AtomicBool::new(false),
            grad: Mutex::new(None),
        })))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![E::zero(); numel_of(shape)], shape).expect("consistent by construction")
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Tensor::from_vec(vec![value; numel_of(shape)], shape).expect("consistent by construction")
    }

    pub fn scalar(value: E) -> Self {
        Tensor::from_vec(vec![value], &[1]).expect("consistent by construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.0.shape[i]
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<E>> {
        self.0.data.read()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.0.data.read().clone()
    }

    /// Scalar extraction; contract-errors on non-scalar tensors.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data.read()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.load(Ordering::Relaxed)
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.0.requires_grad.store(v, Ordering::Relaxed);
    }

    pub fn with_requires_grad(self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.lock().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.lock().is_some()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock() = None;
    }

    /// In-place data mutation; reserved for optimizer updates between steps
    /// and for test setup.
    pub fn with_data_mut(&self, f: impl FnOnce(&mut [E])) {
        f(&mut self.0.data.write());
    }

    pub fn ptr_eq(&self, other: &Tensor<E>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Accumulate a gradient contribution. No-op for requires_grad=false
    /// tensors, which therefore never allocate a gradient buffer.
    pub(crate) fn accum_grad(&self, contrib: &[E]) {
        if !self.requires_grad() {
            return;
        }
        debug_assert_eq!(contrib.len(), self.numel());
        let mut g = self.0.grad.lock();
        match g.as_mut() {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b = *b + *c;
                }
            }
            None => *g = Some(contrib.to_vec()),
        }
    }

    pub(crate) fn map_data<R>(&self, f: impl FnOnce(&[E]) -> R) -> R {
        f(&self.0.data.read())
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

type BackwardOp = Box<dyn FnOnce()>;

/// The gradient tape. Rebuilt per forward pass; confined to one thread.
pub struct Graph<E: Elem = f32> {
    tape: RefCell<Vec<BackwardOp>>,
    grad_enabled: bool,
    _marker: std::marker::PhantomData<E>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph {
            tape: RefCell::new(Vec::new()),
            grad_enabled: true,
            _marker: std::marker::PhantomData,
        }
    }

    /// Inference-mode graph: records nothing, backward is a no-op.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub(crate) fn record(&self, f: impl FnOnce() + 'static) {
        if self.grad_enabled {
            self.tape.borrow_mut().push(Box::new(f));
        }
    }

    pub(crate) fn tracks(&self, inputs: &[&Tensor<E>]) -> bool {
        self.grad_enabled && inputs.iter().any(|t| t.requires_grad())
    }

    pub fn tape_len(&self) -> usize {
        self.tape.borrow().len()
    }

    /// Reverse traversal: visits every recorded op exactly once, in reverse
    /// execution order. After it returns, every requires_grad tensor
    /// reachable from `loss` holds dL/d(tensor); frozen tensors hold none.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let ops = std::mem::take(&mut *self.tape.borrow_mut());
        if !loss.requires_grad() {
            // Nothing trainable feeds the loss; leave all gradients absent.
            return Ok(());
        }
        loss.accum_grad(&[E::one()]);
        for op in ops.into_iter().rev() {
            op();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(vec![1.0, 2.0], &[3]).is_err());
        let t = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn frozen_tensor_never_accumulates() {
        let t = Tensor::<f32>::zeros(&[4]);
        t.accum_grad(&[1.0; 4]);
        assert!(t.grad().is_none());
    }

    #[test]
    fn grad_accumulates_across_contributions() {
        let t = Tensor::<f32>::zeros(&[2]).with_requires_grad();
        t.accum_grad(&[1.0, 2.0]);
        t.accum_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 2.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::<f32>::new();
        let t = Tensor::<f32>::zeros(&[2]).with_requires_grad();
        assert!(matches!(g.backward(&t), Err(Error::Contract(_))));
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
        assert_eq!(strides_of(&[]), Vec::<usize>::new());
    }
}
