//! Operation recording and reverse-mode replay.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// One recorded operation: the tensors involved plus whatever forward
/// byproducts the backward rule needs.
pub(crate) enum Rule {
    Matmul {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    /// Batched matmul over equal leading dims: [B,P,Q] x [B,Q,R].
    Bmm {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Linear {
        x: Tensor,
        w: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Add {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Scale {
        x: Tensor,
        s: f64,
        out: Tensor,
    },
    Gelu {
        x: Tensor,
        out: Tensor,
    },
    Softmax {
        x: Tensor,
        out: Tensor,
    },
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        out: Tensor,
        /// Normalized rows (pre-affine), saved from the forward pass.
        xhat: Vec<f64>,
        /// Per-row 1/sqrt(var + eps).
        inv_std: Vec<f64>,
    },
    ConcatRows {
        parts: Vec<Tensor>,
        out: Tensor,
    },
    SliceRows {
        x: Tensor,
        start_el: usize,
        out: Tensor,
    },
    MeanPoolRows {
        x: Tensor,
        out: Tensor,
    },
    TransposeLast2 {
        x: Tensor,
        out: Tensor,
    },
    Reshape {
        x: Tensor,
        out: Tensor,
    },
    SplitHeads {
        x: Tensor,
        heads: usize,
        out: Tensor,
    },
    MergeHeads {
        x: Tensor,
        out: Tensor,
    },
    Im2col {
        x: Tensor,
        k: usize,
        stride: usize,
        pad: usize,
        out: Tensor,
    },
    AvgPoolChw {
        x: Tensor,
        out: Tensor,
    },
    ChwToTokens {
        x: Tensor,
        out: Tensor,
    },
    TokensToChw {
        x: Tensor,
        out: Tensor,
    },
    CrossEntropy {
        logits: Tensor,
        labels: Vec<usize>,
        /// Row-softmax of the logits, saved from the forward pass.
        probs: Vec<f64>,
        out: Tensor,
    },
    SumAll {
        x: Tensor,
        out: Tensor,
    },
}

/// Ordered record of operations for one forward pass.
///
/// A tape built with [`Tape::no_grad`] records nothing and forces every op
/// output to `requires_grad = false`; forward results are identical.
pub struct Tape {
    nodes: Vec<Rule>,
    enabled: bool,
    count_macs: bool,
    macs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            enabled: true,
            count_macs: false,
            macs: 0,
        }
    }

    /// Forward-only tape: no nodes are recorded, backward is a no-op.
    pub fn no_grad() -> Tape {
        Tape {
            nodes: Vec::new(),
            enabled: false,
            count_macs: false,
            macs: 0,
        }
    }

    /// Enable the multiply-accumulate counter. Only matrix products
    /// (matmul, bmm, linear) count; elementwise work, softmax,
    /// normalization and bias additions do not.
    pub fn with_mac_counting(mut self) -> Tape {
        self.count_macs = true;
        self
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn add_macs(&mut self, n: u64) {
        if self.count_macs {
            self.macs += n;
        }
    }

    pub(crate) fn record(&mut self, rule: Rule) {
        self.nodes.push(rule);
    }

    /// Whether an op over the given inputs should be recorded, and whether
    /// its output participates in gradient computation.
    pub(crate) fn tracks(&self, inputs: &[&Tensor]) -> bool {
        self.enabled && inputs.iter().any(|t| t.requires_grad())
    }

    /// Replay the tape in reverse, accumulating gradients into every
    /// `requires_grad` tensor reachable from `loss`. Consumes the tape so a
    /// recording cannot be replayed (and double-accumulated) twice.
    pub fn backward(self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        loss.accumulate_grad(&[1.0]);
        for node in self.nodes.iter().rev() {
            apply_backward(node);
        }
        Ok(())
    }
}

fn grad_of(t: &Tensor) -> Option<Vec<f64>> {
    t.grad()
}

fn apply_backward(rule: &Rule) {
    match rule {
        Rule::Matmul { a, b, out } => {
            let Some(g) = grad_of(out) else { return };
            let (p, q) = (a.shape()[0], a.shape()[1]);
            let r = b.shape()[1];
            if a.requires_grad() {
                let mut da = vec![0.0; p * q];
                kernels::matmul_nt_into(&g, b.values(), &mut da, p, r, q);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let mut db = vec![0.0; q * r];
                kernels::matmul_tn_into(a.values(), &g, &mut db, p, q, r);
                b.accumulate_grad(&db);
            }
        }
        Rule::Bmm { a, b, out } => {
            let Some(g) = grad_of(out) else { return };
            let (nb, p, q) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let r = b.shape()[2];
            if a.requires_grad() {
                let mut da = vec![0.0; nb * p * q];
                for i in 0..nb {
                    kernels::matmul_nt_into(
                        &g[i * p * r..(i + 1) * p * r],
                        &b.values()[i * q * r..(i + 1) * q * r],
                        &mut da[i * p * q..(i + 1) * p * q],
                        p,
                        r,
                        q,
                    );
                }
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let mut db = vec![0.0; nb * q * r];
                for i in 0..nb {
                    kernels::matmul_tn_into(
                        &a.values()[i * p * q..(i + 1) * p * q],
                        &g[i * p * r..(i + 1) * p * r],
                        &mut db[i * q * r..(i + 1) * q * r],
                        p,
                        q,
                        r,
                    );
                }
                b.accumulate_grad(&db);
            }
        }
        Rule::Linear { x, w, b, out } => {
            let Some(g) = grad_of(out) else { return };
            let (n, din) = (x.shape()[0], x.shape()[1]);
            let dout = w.shape()[1];
            if x.requires_grad() {
                let mut dx = vec![0.0; n * din];
                kernels::matmul_nt_into(&g, w.values(), &mut dx, n, dout, din);
                x.accumulate_grad(&dx);
            }
            if w.requires_grad() {
                let mut dw = vec![0.0; din * dout];
                kernels::matmul_tn_into(x.values(), &g, &mut dw, n, din, dout);
                w.accumulate_grad(&dw);
            }
            if b.requires_grad() {
                let mut db = vec![0.0; dout];
                for row in g.chunks(dout) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                b.accumulate_grad(&db);
            }
        }
        Rule::Add { a, b, out } => {
            let Some(g) = grad_of(out) else { return };
            if a.requires_grad() {
                a.accumulate_grad(&g);
            }
            if b.requires_grad() {
                b.accumulate_grad(&g);
            }
        }
        Rule::Mul { a, b, out } => {
            let Some(g) = grad_of(out) else { return };
            if a.requires_grad() {
                let da: Vec<f64> = g.iter().zip(b.values()).map(|(gi, bi)| gi * bi).collect();
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let db: Vec<f64> = g.iter().zip(a.values()).map(|(gi, ai)| gi * ai).collect();
                b.accumulate_grad(&db);
            }
        }
        Rule::Scale { x, s, out } => {
            let Some(g) = grad_of(out) else { return };
            if x.requires_grad() {
                let dx: Vec<f64> = g.iter().map(|gi| gi * s).collect();
                x.accumulate_grad(&dx);
            }
        }
        Rule::Gelu { x, out } => {
            let Some(g) = grad_of(out) else { return };
            if x.requires_grad() {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(x.values())
                    .map(|(gi, &xi)| gi * kernels::gelu_grad_scalar(xi))
                    .collect();
                x.accumulate_grad(&dx);
            }
        }
        Rule::Softmax { x, out } => {
            let Some(g) = grad_of(out) else { return };
            if x.requires_grad() {
                let width = *out.shape().last().expect("softmax output has dims");
                let y = out.values();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .chunks(width)
                    .zip(g.chunks(width))
                    .zip(dx.chunks_mut(width))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Rule::LayerNorm {
            x,
            gamma,
            beta,
            out,
            xhat,
            inv_std,
        } => {
            let Some(g) = grad_of(out) else { return };
            let width = gamma.numel();
            let rows = xhat.len() / width;
            if gamma.requires_grad() {
                let mut dg = vec![0.0; width];
                for r in 0..rows {
                    for j in 0..width {
                        dg[j] += g[r * width + j] * xhat[r * width + j];
                    }
                }
                gamma.accumulate_grad(&dg);
            }
            if beta.requires_grad() {
                let mut db = vec![0.0; width];
                for row in g.chunks(width) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                beta.accumulate_grad(&db);
            }
            if x.requires_grad() {
                let gam = gamma.values();
                let mut dx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let gr = &g[r * width..(r + 1) * width];
                    let xh = &xhat[r * width..(r + 1) * width];
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for j in 0..width {
                        let gg = gr[j] * gam[j];
                        mean_gg += gg;
                        mean_ggx += gg * xh[j];
                    }
                    mean_gg /= width as f64;
                    mean_ggx /= width as f64;
                    let dr = &mut dx[r * width..(r + 1) * width];
                    for j in 0..width {
                        let gg = gr[j] * gam[j];
                        dr[j] = inv_std[r] * (gg - mean_gg - xh[j] * mean_ggx);
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Rule::ConcatRows { parts, out } => {
            let Some(g) = grad_of(out) else { return };
            let mut offset = 0;
            for part in parts {
                let n = part.numel();
                if part.requires_grad() {
                    part.accumulate_grad(&g[offset..offset + n]);
                }
                offset += n;
            }
        }
        Rule::SliceRows { x, start_el, out } => {
            let Some(g) = grad_of(out) else { return };
            if x.requires_grad() {
                let mut dx = vec![0.0; x.numel()];
                dx[*start_el..*start_el + g.len()].copy_from_slice(&g);
                x.accumulate_grad(&dx);
            }
        }
        Rule::MeanPoolRows { x, out } => {
            let Some(g) = grad_of(out) else { return };
            if x.requires_grad() {
                let d = out.numel();
                let n = x.numel() / d;
                let inv = 1.0 / n as f64;
                let mut dx = vec![0.0; x.numel()];
                for row in dx.chunks_mut(d) {
                    for (v, gi) in row.iter_mut().zip(&g) {
                        *v = gi * inv;
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Rule::TransposeLast2 { x, out } => {
            let Some(g) = grad_of(out) else { return };
            if x.requires_grad() {
                // Transposing the gradient of [.., q, p] restores [.., p, q].
                let os = out.shape();
                let (q, p) = (os[os.len() - 2], os[os.len() - 1]);
                let batch = out.numel() / (p * q);
                let mut dx = vec![0.0; x.numel()];
                for i in 0..batch {
                    kernels::transpose_into(
                        &g[i * p * q..(i + 1) * p * q],
                        &mut dx[i * p * q..(i + 1) * p * q],
                        q,
                        p,
                    );
                }
                x.accumulate_grad(&dx);
            }
        }
        Rule::Reshape { x, out } => {
            let Some(g) = grad_of(out) else { return };
            if x.requires_grad() {
                x.accumulate_grad(&g);
            }
        }
        Rule::SplitHeads { x, heads, out } => {
            let Some(g) = grad_of(out) else { return };
            if x.requires_grad() {
                let n = x.shape()[0];
                let d_model = x.shape()[1];
                let hd = d_model / heads;
                let mut dx = vec![0.0; x.numel()];
                for i in 0..*heads {
                    for t in 0..n {
                        for k in 0..hd {
                            dx[t * d_model + i * hd + k] += g[(i * n + t) * hd + k];
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Rule::MergeHeads { x, out } => {
            let Some(g) = grad_of(out) else { return };
            if x.requires_grad() {
                let (heads, n, hd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let d_model = heads * hd;
                let mut dx = vec![0.0; x.numel()];
                for i in 0..heads {
                    for t in 0..n {
                        for k in 0..hd {
                            dx[(i * n + t) * hd + k] += g[t * d_model + i * hd + k];
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Rule::Im2col {
            x,
            k,
            stride,
            pad,
            out,
        } => {
            let Some(g) = grad_of(out) else { return };
            if x.requires_grad() {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let out_w = (w + 2 * pad - k) / stride + 1;
                let cols = c * k * k;
                let mut dx = vec![0.0; x.numel()];
                for (pos, grow) in g.chunks(cols).enumerate() {
                    let oi = pos / out_w;
                    let oj = pos % out_w;
                    for ci in 0..c {
                        for ki in 0..*k {
                            for kj in 0..*k {
                                let ii = (oi * stride + ki) as isize - *pad as isize;
                                let jj = (oj * stride + kj) as isize - *pad as isize;
                                if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w {
                                    dx[ci * h * w + ii as usize * w + jj as usize] +=
                                        grow[(ci * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Rule::AvgPoolChw { x, out } => {
            let Some(g) = grad_of(out) else { return };
            if x.requires_grad() {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (out.shape()[1], out.shape()[2]);
                let (ch, cw) = (h / oh, w / ow);
                let inv = 1.0 / (ch * cw) as f64;
                let mut dx = vec![0.0; x.numel()];
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[ci * h * w + i * w + j] =
                                g[ci * oh * ow + (i / ch) * ow + (j / cw)] * inv;
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Rule::ChwToTokens { x, out } => {
            let Some(g) = grad_of(out) else { return };
            if x.requires_grad() {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let n = h * w;
                let mut dx = vec![0.0; x.numel()];
                for pos in 0..n {
                    for ci in 0..c {
                        dx[ci * n + pos] += g[pos * c + ci];
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Rule::TokensToChw { x, out } => {
            let Some(g) = grad_of(out) else { return };
            if x.requires_grad() {
                let (c, h, w) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let n = h * w;
                let mut dx = vec![0.0; x.numel()];
                for pos in 0..n {
                    for ci in 0..c {
                        dx[pos * c + ci] += g[ci * n + pos];
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Rule::CrossEntropy {
            logits,
            labels,
            probs,
            out,
        } => {
            let Some(g) = grad_of(out) else { return };
            if logits.requires_grad() {
                let b = labels.len();
                let c = logits.shape()[1];
                let scale = g[0] / b as f64;
                let mut dl = vec![0.0; logits.numel()];
                for (bi, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let indicator = if j == label { 1.0 } else { 0.0 };
                        dl[bi * c + j] = scale * (probs[bi * c + j] - indicator);
                    }
                }
                logits.accumulate_grad(&dl);
            }
        }
        Rule::SumAll { x, out } => {
            let Some(g) = grad_of(out) else { return };
            if x.requires_grad() {
                x.accumulate_grad(&vec![g[0]; x.numel()]);
            }
        }
    }
}

