//! Forward operations. Every op validates shapes, computes its result into a
//! fresh tensor, and records a backward rule on the tape when any input
//! participates in gradient computation.

use super::kernels;
use super::tape::{Rule, Tape};
use super::Tensor;
use crate::error::{Error, Result};

/// 2D matrix product [P,Q] x [Q,R] -> [P,R].
pub fn matmul(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (p, q) = (a.shape()[0], a.shape()[1]);
    let r = b.shape()[1];
    let mut out = vec![0.0; p * r];
    kernels::matmul_into(a.values(), b.values(), &mut out, p, q, r);
    tape.add_macs((p * q * r) as u64);
    let track = tape.tracks(&[a, b]);
    let out = Tensor::new_result(out, vec![p, r], track);
    if track {
        tape.record(Rule::Matmul {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Batched matrix product [B,P,Q] x [B,Q,R] -> [B,P,R].
pub fn bmm(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1]
    {
        return Err(Error::shape("bmm", a.shape(), b.shape()));
    }
    let (nb, p, q) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let r = b.shape()[2];
    let mut out = vec![0.0; nb * p * r];
    for i in 0..nb {
        kernels::matmul_into(
            &a.values()[i * p * q..(i + 1) * p * q],
            &b.values()[i * q * r..(i + 1) * q * r],
            &mut out[i * p * r..(i + 1) * p * r],
            p,
            q,
            r,
        );
    }
    tape.add_macs((nb * p * q * r) as u64);
    let track = tape.tracks(&[a, b]);
    let out = Tensor::new_result(out, vec![nb, p, r], track);
    if track {
        tape.record(Rule::Bmm {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Affine map x[N,Din] * w[Din,Dout] + b[Dout]. Bias addition is not counted
/// toward multiply-accumulates.
pub fn linear(tape: &mut Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[1];
    if b.shape() != [dout] {
        return Err(Error::shape("linear bias", b.shape(), &[dout]));
    }
    let mut out = vec![0.0; n * dout];
    kernels::matmul_into(x.values(), w.values(), &mut out, n, din, dout);
    for row in out.chunks_mut(dout) {
        for (o, bv) in row.iter_mut().zip(b.values()) {
            *o += bv;
        }
    }
    tape.add_macs((n * din * dout) as u64);
    let track = tape.tracks(&[x, w, b]);
    let out = Tensor::new_result(out, vec![n, dout], track);
    if track {
        tape.record(Rule::Linear {
            x: x.clone(),
            w: w.clone(),
            b: b.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

pub fn add(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let out: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
    let track = tape.tracks(&[a, b]);
    let out = Tensor::new_result(out, a.shape().to_vec(), track);
    if track {
        tape.record(Rule::Add {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Elementwise product.
pub fn mul(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mul", a.shape(), b.shape()));
    }
    let out: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect();
    let track = tape.tracks(&[a, b]);
    let out = Tensor::new_result(out, a.shape().to_vec(), track);
    if track {
        tape.record(Rule::Mul {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

pub fn scale(tape: &mut Tape, x: &Tensor, s: f64) -> Tensor {
    let out: Vec<f64> = x.values().iter().map(|v| v * s).collect();
    let track = tape.tracks(&[x]);
    let out = Tensor::new_result(out, x.shape().to_vec(), track);
    if track {
        tape.record(Rule::Scale {
            x: x.clone(),
            s,
            out: out.clone(),
        });
    }
    out
}

pub fn gelu(tape: &mut Tape, x: &Tensor) -> Tensor {
    let out: Vec<f64> = x.values().iter().map(|&v| kernels::gelu_scalar(v)).collect();
    let track = tape.tracks(&[x]);
    let out = Tensor::new_result(out, x.shape().to_vec(), track);
    if track {
        tape.record(Rule::Gelu {
            x: x.clone(),
            out: out.clone(),
        });
    }
    out
}

/// Softmax over the last dimension, stabilized by max subtraction.
pub fn softmax_lastdim(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    if x.has_nan() {
        return Err(Error::numeric("softmax_lastdim", "NaN in input"));
    }
    let width = *x
        .shape()
        .last()
        .ok_or_else(|| Error::contract("softmax_lastdim", "zero-dimensional input"))?;
    let mut out = vec![0.0; x.numel()];
    kernels::softmax_rows_into(x.values(), &mut out, width);
    let track = tape.tracks(&[x]);
    let out = Tensor::new_result(out, x.shape().to_vec(), track);
    if track {
        tape.record(Rule::Softmax {
            x: x.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Per-row normalization to zero mean / unit variance over the last
/// dimension, followed by the affine map gamma * xhat + beta.
pub fn layer_norm(
    tape: &mut Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let width = *x
        .shape()
        .last()
        .ok_or_else(|| Error::contract("layer_norm", "zero-dimensional input"))?;
    if gamma.shape() != [width] || beta.shape() != [width] {
        return Err(Error::shape("layer_norm", gamma.shape(), &[width]));
    }
    let rows = x.numel() / width;
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let xr = &x.values()[r * width..(r + 1) * width];
        let mean: f64 = xr.iter().sum::<f64>() / width as f64;
        let var: f64 = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[r] = istd;
        for j in 0..width {
            let xh = (xr[j] - mean) * istd;
            xhat[r * width + j] = xh;
            out[r * width + j] = gamma.values()[j] * xh + beta.values()[j];
        }
    }
    let track = tape.tracks(&[x, gamma, beta]);
    let out = Tensor::new_result(out, x.shape().to_vec(), track);
    if track {
        tape.record(Rule::LayerNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            out: out.clone(),
            xhat,
            inv_std,
        });
    }
    Ok(out)
}

/// Stack 2D token matrices along the row axis; all parts must share the
/// column count. Row order follows the argument order.
pub fn concat_tokens(tape: &mut Tape, parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::contract("concat_tokens", "no tensors to concatenate"));
    }
    let d = parts[0].shape().last().copied().unwrap_or(0);
    let mut rows = 0;
    for part in parts {
        if part.ndim() != 2 || part.shape()[1] != d {
            return Err(Error::shape("concat_tokens", part.shape(), parts[0].shape()));
        }
        rows += part.shape()[0];
    }
    let mut out = Vec::with_capacity(rows * d);
    for part in parts {
        out.extend_from_slice(part.values());
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let track = tape.tracks(&refs);
    let out = Tensor::new_result(out, vec![rows, d], track);
    if track {
        tape.record(Rule::ConcatRows {
            parts: parts.to_vec(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Contiguous row slice [start, start+len) of a 2D tensor.
pub fn slice_rows(tape: &mut Tape, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::shape("slice_rows", x.shape(), &[0, 0]));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if start + len > n {
        return Err(Error::index(
            "slice_rows",
            format!("rows {start}..{} out of 0..{n}", start + len),
        ));
    }
    let out = x.values()[start * d..(start + len) * d].to_vec();
    let track = tape.tracks(&[x]);
    let out = Tensor::new_result(out, vec![len, d], track);
    if track {
        tape.record(Rule::SliceRows {
            x: x.clone(),
            start_el: start * d,
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Arithmetic mean over the token (row) axis: [N,D] -> [D].
pub fn mean_pool_tokens(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::shape("mean_pool_tokens", x.shape(), &[0, 0]));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; d];
    for row in x.values().chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = 1.0 / n as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    let track = tape.tracks(&[x]);
    let out = Tensor::new_result(out, vec![d], track);
    if track {
        tape.record(Rule::MeanPoolRows {
            x: x.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Swap the last two axes of a 2D or 3D tensor.
pub fn transpose_last2(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    if x.ndim() < 2 {
        return Err(Error::shape("transpose_last2", x.shape(), &[0, 0]));
    }
    let s = x.shape();
    let (p, q) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = x.numel() / (p * q);
    let mut out = vec![0.0; x.numel()];
    for i in 0..batch {
        kernels::transpose_into(
            &x.values()[i * p * q..(i + 1) * p * q],
            &mut out[i * p * q..(i + 1) * p * q],
            p,
            q,
        );
    }
    let mut shape = s.to_vec();
    let l = shape.len();
    shape.swap(l - 2, l - 1);
    let track = tape.tracks(&[x]);
    let out = Tensor::new_result(out, shape, track);
    if track {
        tape.record(Rule::TransposeLast2 {
            x: x.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Reinterpret the value buffer under a new shape with the same element count.
pub fn reshape(tape: &mut Tape, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(Error::shape("reshape", x.shape(), shape));
    }
    let track = tape.tracks(&[x]);
    let out = Tensor::new_result(x.values().to_vec(), shape.to_vec(), track);
    if track {
        tape.record(Rule::Reshape {
            x: x.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Regroup [N, D] into per-head layout [I, N, D/I].
pub fn split_heads(tape: &mut Tape, x: &Tensor, heads: usize) -> Result<Tensor> {
    if x.ndim() != 2 || heads == 0 || !x.shape()[1].is_multiple_of(heads) {
        return Err(Error::shape("split_heads", x.shape(), &[heads]));
    }
    let (n, d_model) = (x.shape()[0], x.shape()[1]);
    let hd = d_model / heads;
    let mut out = vec![0.0; x.numel()];
    for i in 0..heads {
        for t in 0..n {
            for k in 0..hd {
                out[(i * n + t) * hd + k] = x.values()[t * d_model + i * hd + k];
            }
        }
    }
    let track = tape.tracks(&[x]);
    let out = Tensor::new_result(out, vec![heads, n, hd], track);
    if track {
        tape.record(Rule::SplitHeads {
            x: x.clone(),
            heads,
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Inverse of [`split_heads`]: [I, N, d] -> [N, I*d].
pub fn merge_heads(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::shape("merge_heads", x.shape(), &[0, 0, 0]));
    }
    let (heads, n, hd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d_model = heads * hd;
    let mut out = vec![0.0; x.numel()];
    for i in 0..heads {
        for t in 0..n {
            for k in 0..hd {
                out[t * d_model + i * hd + k] = x.values()[(i * n + t) * hd + k];
            }
        }
    }
    let track = tape.tracks(&[x]);
    let out = Tensor::new_result(out, vec![n, d_model], track);
    if track {
        tape.record(Rule::MergeHeads {
            x: x.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Unfold a [C,H,W] map into convolution patches: one row per output
/// position, one column per (channel, ki, kj). Out-of-bounds taps read zero.
pub fn im2col(tape: &mut Tape, x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::shape("im2col", x.shape(), &[0, 0, 0]));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::layout("im2col", format!("kernel {k} exceeds padded input {h}x{w}")));
    }
    let out_h = (h + 2 * pad - k) / stride + 1;
    let out_w = (w + 2 * pad - k) / stride + 1;
    let cols = c * k * k;
    let mut out = vec![0.0; out_h * out_w * cols];
    for oi in 0..out_h {
        for oj in 0..out_w {
            let row = &mut out[(oi * out_w + oj) * cols..(oi * out_w + oj + 1) * cols];
            for ci in 0..c {
                for ki in 0..k {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for kj in 0..k {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        row[(ci * k + ki) * k + kj] =
                            x.values()[ci * h * w + ii as usize * w + jj as usize];
                    }
                }
            }
        }
    }
    let track = tape.tracks(&[x]);
    let out = Tensor::new_result(out, vec![out_h * out_w, cols], track);
    if track {
        tape.record(Rule::Im2col {
            x: x.clone(),
            k,
            stride,
            pad,
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Average-pool a [C,H,W] map down to [C,h,w]; H and W must be divisible by
/// the target sides.
pub fn avg_pool_chw(tape: &mut Tape, x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::shape("avg_pool_chw", x.shape(), &[0, 0, 0]));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = target;
    if oh == 0 || ow == 0 || h % oh != 0 || w % ow != 0 {
        return Err(Error::layout(
            "avg_pool_chw",
            format!("{h}x{w} not divisible by target {oh}x{ow}"),
        ));
    }
    let (ch, cw) = (h / oh, w / ow);
    let inv = 1.0 / (ch * cw) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[ci * oh * ow + (i / ch) * ow + (j / cw)] +=
                    x.values()[ci * h * w + i * w + j] * inv;
            }
        }
    }
    let track = tape.tracks(&[x]);
    let out = Tensor::new_result(out, vec![c, oh, ow], track);
    if track {
        tape.record(Rule::AvgPoolChw {
            x: x.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// [C,H,W] -> [H*W, C]: row index is the spatial position in row-major
/// order, column index is the channel.
pub fn chw_to_tokens(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::shape("chw_to_tokens", x.shape(), &[0, 0, 0]));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = h * w;
    let mut out = vec![0.0; x.numel()];
    for pos in 0..n {
        for ci in 0..c {
            out[pos * c + ci] = x.values()[ci * n + pos];
        }
    }
    let track = tape.tracks(&[x]);
    let out = Tensor::new_result(out, vec![n, c], track);
    if track {
        tape.record(Rule::ChwToTokens {
            x: x.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Inverse of [`chw_to_tokens`] for a known spatial grid.
pub fn tokens_to_chw(tape: &mut Tape, x: &Tensor, hw: (usize, usize)) -> Result<Tensor> {
    let (h, w) = hw;
    if x.ndim() != 2 || x.shape()[0] != h * w {
        return Err(Error::shape("tokens_to_chw", x.shape(), &[h * w, 0]));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; x.numel()];
    for pos in 0..n {
        for ci in 0..c {
            out[ci * n + pos] = x.values()[pos * c + ci];
        }
    }
    let track = tape.tracks(&[x]);
    let out = Tensor::new_result(out, vec![c, h, w], track);
    if track {
        tape.record(Rule::TokensToChw {
            x: x.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Mean over the batch of -log softmax(logits)[label]. Output is a
/// single-element tensor.
pub fn cross_entropy(tape: &mut Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape("cross_entropy", logits.shape(), &[labels.len(), 0]));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::index(
                "cross_entropy",
                format!("label {label} at row {i} out of 0..{c}"),
            ));
        }
    }
    let mut probs = vec![0.0; b * c];
    kernels::softmax_rows_into(logits.values(), &mut probs, c);
    let mut loss = 0.0;
    for (bi, &label) in labels.iter().enumerate() {
        loss -= probs[bi * c + label].max(f64::MIN_POSITIVE).ln();
    }
    loss /= b as f64;
    let track = tape.tracks(&[logits]);
    let out = Tensor::new_result(vec![loss], vec![1], track);
    if track {
        tape.record(Rule::CrossEntropy {
            logits: logits.clone(),
            labels: labels.to_vec(),
            probs,
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Sum of all elements, as a single-element tensor.
pub fn sum_all(tape: &mut Tape, x: &Tensor) -> Tensor {
    let s: f64 = x.values().iter().sum();
    let track = tape.tracks(&[x]);
    let out = Tensor::new_result(vec![s], vec![1], track);
    if track {
        tape.record(Rule::SumAll {
            x: x.clone(),
            out: out.clone(),
        });
    }
    out
}
