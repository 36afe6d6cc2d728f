//! Central-difference gradient oracle.

use super::Tensor;
use crate::error::Result;

/// Estimate df/dx elementwise via central differences:
/// (f(x + h e_i) - f(x - h e_i)) / 2h.
///
/// `f` must be deterministic; it is evaluated 2 * numel times on freshly
/// built tensors, so it never sees the recording state of the caller.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let base = x.values().to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::from_vec(plus, x.shape())?)?;
        let fm = f(&Tensor::from_vec(minus, x.shape())?)?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::from_vec(grad, x.shape())
}

/// Central differences at selected flat indices only; used when perturbing
/// every element would be prohibitively slow (full-model checks).
pub fn finite_diff_grad_at<F>(f: F, x: &Tensor, indices: &[usize], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let base = x.values().to_vec();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::from_vec(plus, x.shape())?)?;
        let fm = f(&Tensor::from_vec(minus, x.shape())?)?;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Largest elementwise relative error between an analytic gradient and its
/// finite-difference estimate. The denominator is floored so that
/// near-zero pairs compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
