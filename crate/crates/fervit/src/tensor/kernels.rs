//! Raw dense f64 kernels behind the tape ops.
//!
//! Everything here works on flat row-major slices and is free of tape or
//! gradient concerns. With the `parallel` feature (default) the matrix
//! products switch to rayon data parallelism above a size threshold; each
//! output element is still produced by exactly one thread with the same
//! sequential inner loop, so results are bit-identical to the sequential
//! fallback.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work size (in multiply-accumulates) above which matrix products go
/// parallel. Below it the rayon dispatch overhead outweighs the win.
const PAR_THRESHOLD: usize = 256 * 1024;

/// out[p,r] = sum_q a[p,q] * b[q,r]
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(out.len(), p * r);
    let row = |out_row: &mut [f64], a_row: &[f64]| {
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * r..(k + 1) * r];
            for (c, &bkj) in out_row.iter_mut().zip(b_row) {
                *c += aik * bkj;
            }
        }
    };
    #[cfg(feature = "parallel")]
    if p * q * r >= PAR_THRESHOLD && p > 1 {
        out.par_chunks_mut(r)
            .zip(a.par_chunks(q))
            .for_each(|(out_row, a_row)| row(out_row, a_row));
        return;
    }
    for (out_row, a_row) in out.chunks_mut(r).zip(a.chunks(q)) {
        row(out_row, a_row);
    }
}

/// out[p,r] = sum_q a[p,q] * b[r,q]   (b used transposed). Materializes
/// b^T once and reuses the row-streaming kernel: the per-element dot loop
/// is a serial FP reduction the compiler cannot vectorize, while the
/// transposed form runs wide.
pub fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), r * q);
    debug_assert_eq!(out.len(), p * r);
    let mut bt = vec![0.0; q * r];
    transpose_into(b, &mut bt, r, q);
    matmul_into(a, &bt, out, p, q, r);
}

/// out[q,r] = sum_p a[p,q] * b[p,r]   (a used transposed)
pub fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), p * r);
    debug_assert_eq!(out.len(), q * r);
    #[cfg(feature = "parallel")]
    if p * q * r >= PAR_THRESHOLD && q > 1 {
        out.par_chunks_mut(r).enumerate().for_each(|(k, out_row)| {
            for i in 0..p {
                let aik = a[i * q + k];
                let b_row = &b[i * r..(i + 1) * r];
                for (c, &bij) in out_row.iter_mut().zip(b_row) {
                    *c += aik * bij;
                }
            }
        });
        return;
    }
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let b_row = &b[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            let out_row = &mut out[k * r..(k + 1) * r];
            for (c, &bij) in out_row.iter_mut().zip(b_row) {
                *c += aik * bij;
            }
        }
    }
}

pub fn transpose_into(x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
}

/// Numerically stabilized softmax over each contiguous slice of `width`.
pub fn softmax_rows_into(x: &[f64], out: &mut [f64], width: usize) {
    debug_assert_eq!(x.len() % width, 0);
    for (xr, or) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
}

/// Tanh-approximation GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent element-loop oracle: out[i,j] = sum_k a[i,k] b[k,j].
    fn matmul_oracle(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                let mut s = 0.0;
                for k in 0..q {
                    s += a[i * q + k] * b[k * r + j];
                }
                out[i * r + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::Rng::new(11);
        let (p, q, r) = (3, 4, 2);
        let a: Vec<f64> = (0..p * q).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..q * r).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut out = vec![0.0; p * r];
        matmul_into(&a, &b, &mut out, p, q, r);
        let expect = matmul_oracle(&a, &b, p, q, r);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn nt_and_tn_variants_agree_with_explicit_transposes() {
        let mut rng = crate::rng::Rng::new(5);
        let (p, q, r) = (4, 5, 3);
        let a: Vec<f64> = (0..p * q).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..r * q).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        // a (p,q) * b^T (q,r), against oracle on materialized transpose
        let mut bt = vec![0.0; q * r];
        transpose_into(&b, &mut bt, r, q);
        let expect = matmul_oracle(&a, &bt, p, q, r);
        let mut out = vec![0.0; p * r];
        matmul_nt_into(&a, &b, &mut out, p, q, r);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() <= 1e-12);
        }

        // a^T (q,p) * c (p,r)
        let c: Vec<f64> = (0..p * r).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut at = vec![0.0; p * q];
        transpose_into(&a, &mut at, p, q);
        let expect = matmul_oracle(&at, &c, q, p, r);
        let mut out = vec![0.0; q * r];
        matmul_tn_into(&a, &c, &mut out, p, q, r);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn large_matmul_parallel_path_is_bit_identical_to_oracle() {
        // Big enough to cross PAR_THRESHOLD when the parallel feature is on.
        let mut rng = crate::rng::Rng::new(77);
        let (p, q, r) = (96, 64, 96);
        let a: Vec<f64> = (0..p * q).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..q * r).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut out = vec![0.0; p * r];
        matmul_into(&a, &b, &mut out, p, q, r);
        let expect = matmul_oracle(&a, &b, p, q, r);
        // Same inner-loop order per element: exact equality, not approximate.
        for (i, (x, y)) in out.iter().zip(&expect).enumerate() {
            // The kernel accumulates along k in slice order, identical to the
            // oracle's k loop, so the sums round identically.
            assert_eq!(x, y, "element {i}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = vec![0.0, 0.0, 0.0, 0.0, 1000.0, 1000.5, 999.0, 1001.0];
        let mut out = vec![0.0; 8];
        softmax_rows_into(&x, &mut out, 4);
        for row in out.chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!((out[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gelu_zero_fixed_point_and_slope() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // Derivative via central difference.
        let h = 1e-6;
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let num = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((num - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }
}
