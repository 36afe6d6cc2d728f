//! Dense f64 tensor with reverse-mode gradient accumulation.
//!
//! The design is deliberately minimal: flat row-major storage, immutable
//! values after construction, a new tensor per operation, and a [`Tape`]
//! that records one node per recorded op. Calling [`Tape::backward`] replays
//! the nodes in reverse and accumulates gradients into every tensor that
//! was created with `requires_grad`.

mod fd;
pub(crate) mod kernels;
mod ops;
#[cfg(test)]
mod ops_tests;
mod tape;

pub use fd::{finite_diff_grad, finite_diff_grad_at, max_rel_err};
pub use ops::*;
pub use tape::Tape;

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::sync::{Arc, Mutex};

struct Inner {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
}

/// Cheap-to-clone handle to an immutable value buffer plus its gradient slot.
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
    fn build(values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != values.len() || shape.contains(&0) {
            return Err(Error::shape("tensor construction", &shape, &[values.len()]));
        }
        Ok(Tensor {
            inner: Arc::new(Inner {
                shape,
                values,
                grad: Mutex::new(None),
                requires_grad,
            }),
        })
    }

    pub fn from_vec(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::build(values, shape.to_vec(), false)
    }

    /// A leaf that participates in gradient computation.
    pub fn param(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::build(values, shape.to_vec(), true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::build(vec![0.0; numel], shape.to_vec(), false).expect("positive dims")
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::build(vec![v; numel], shape.to_vec(), false).expect("positive dims")
    }

    /// Uniform values in [lo, hi), drawn from an explicit generator.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| rng.uniform_in(lo, hi)).collect();
        Tensor::build(values, shape.to_vec(), false).expect("positive dims")
    }

    pub(crate) fn new_result(values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor::build(values, shape, requires_grad).expect("op produced a valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.values
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Rebuild this tensor with the grad requirement flipped. Values are
    /// shared logically (copied once); the original is untouched.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Tensor {
        Tensor::build(
            self.inner.values.clone(),
            self.inner.shape.clone(),
            requires_grad,
        )
        .expect("same shape")
    }

    /// The scalar value of a single-element tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::contract(
                "scalar",
                format!("expected one element, got shape {:?}", self.shape()),
            ));
        }
        Ok(self.inner.values[0])
    }

    /// Snapshot of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Identity of the underlying buffer; two clones of one tensor share it.
    pub fn ptr_id(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    pub fn has_nan(&self) -> bool {
        self.inner.values.iter().any(|v| v.is_nan())
    }
}
