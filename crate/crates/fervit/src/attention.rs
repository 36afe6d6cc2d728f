//! Attention kernels.
//!
//! Three kernels share one multi-head core:
//!
//! - [`msa`]: multi-head self-attention (queries, keys, values from one
//!   token matrix),
//! - [`mcsa`]: vanilla multi-head cross-attention (queries from one stream,
//!   keys/values from the other, full token map, quadratic in tokens),
//! - [`w_mcsa`]: window-based multi-head cross-attention. The image tokens
//!   are split into non-overlapping windows of M tokens; the landmark
//!   feature map is average-pooled down to exactly M tokens and supplies the
//!   queries for every window; a learnable per-head M x M bias is added to
//!   the attention logits inside each window. Linear in the token count for
//!   fixed M.
//!
//! Each kernel can emit its post-softmax attention maps through an optional
//! [`AttnTrace`] sink, which the visualization exporter consumes.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, Tape, Tensor};

/// Projection weights for one attention kernel. The relative position bias
/// table is present only for the windowed kernel: one M x M table per head,
/// zero-initialized.
#[derive(Clone)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub bias_table: Option<Tensor>,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    /// Seeded initialization: uniform Xavier weights, zero bias table when
    /// `window_tokens` is given.
    pub fn init(
        dim: usize,
        heads: usize,
        window_tokens: Option<usize>,
        rng: &mut Rng,
    ) -> Result<AttentionParams> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        let limit = (6.0 / (dim + dim) as f64).sqrt();
        let mut proj = || {
            Tensor::param(
                (0..dim * dim)
                    .map(|_| rng.uniform_in(-limit, limit))
                    .collect(),
                &[dim, dim],
            )
            .expect("square projection")
        };
        let w_q = proj();
        let w_k = proj();
        let w_v = proj();
        let w_o = proj();
        let bias_table = match window_tokens {
            Some(m) => Some(Tensor::param(vec![0.0; heads * m * m], &[heads, m, m])?),
            None => None,
        };
        Ok(AttentionParams {
            w_q,
            w_k,
            w_v,
            w_o,
            bias_table,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn validate_dim(&self, d: usize, op: &'static str) -> Result<()> {
        if self.dim != d {
            return Err(Error::shape(op, &[d], &[self.dim]));
        }
        Ok(())
    }
}

/// Non-overlapping 1D windowing of a token axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub window_tokens: usize,
    pub num_windows: usize,
    pub total_tokens: usize,
}

impl WindowLayout {
    pub fn new(total_tokens: usize, window_tokens: usize) -> Result<WindowLayout> {
        if window_tokens == 0 || !total_tokens.is_multiple_of(window_tokens) {
            return Err(Error::layout(
                "window_layout",
                format!("{total_tokens} tokens not divisible into windows of {window_tokens}"),
            ));
        }
        Ok(WindowLayout {
            window_tokens,
            num_windows: total_tokens / window_tokens,
            total_tokens,
        })
    }
}

/// Post-softmax attention maps captured from a kernel run.
#[derive(Debug, Default, Clone)]
pub struct AttnTrace {
    pub maps: Vec<AttnMap>,
}

/// One attention map: `weights[(h * queries + q) * keys + k]` is the weight
/// head `h` puts on key token `k` for query token `q`.
#[derive(Debug, Clone)]
pub struct AttnMap {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub weights: Vec<f64>,
}

impl AttnMap {
    /// Total attention mass received by each key token, summed over heads
    /// and queries.
    pub fn mass_per_key(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.keys];
        for chunk in self.weights.chunks(self.keys) {
            for (m, w) in mass.iter_mut().zip(chunk) {
                *m += w;
            }
        }
        mass
    }
}

/// Split [N, D] tokens into `[num_windows, M, D]`; window w, row t is input
/// row w*M + t. Pure layout change, no data altered.
pub fn window_partition(tape: &mut Tape, x: &Tensor, window_tokens: usize) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::shape("window_partition", x.shape(), &[0, 0]));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let layout = WindowLayout::new(n, window_tokens)?;
    tensor::reshape(tape, x, &[layout.num_windows, window_tokens, d])
}

/// Exact inverse of [`window_partition`].
pub fn window_merge(tape: &mut Tape, windows: &Tensor) -> Result<Tensor> {
    if windows.ndim() != 3 {
        return Err(Error::shape("window_merge", windows.shape(), &[0, 0, 0]));
    }
    let (w, m, d) = (windows.shape()[0], windows.shape()[1], windows.shape()[2]);
    tensor::reshape(tape, windows, &[w * m, d])
}

/// Average-pool a [C,H,W] landmark map to an (h, w) grid and lay it out as
/// M = h*w tokens of dimension C: row index is the spatial position, column
/// index is the channel.
pub fn downsample_landmark(
    tape: &mut Tape,
    x_lm: &Tensor,
    target: (usize, usize),
) -> Result<Tensor> {
    let pooled = tensor::avg_pool_chw(tape, x_lm, target)?;
    tensor::chw_to_tokens(tape, &pooled)
}

/// Multi-head attention core over one (query, key/value) pair. `bias` is an
/// optional [heads, Nq, Nk] additive term on the logits.
fn attention_core(
    tape: &mut Tape,
    q_src: &Tensor,
    kv_src: &Tensor,
    p: &AttentionParams,
    bias: Option<&Tensor>,
    trace: Option<&mut AttnTrace>,
) -> Result<Tensor> {
    let q = tensor::matmul(tape, q_src, &p.w_q)?;
    let k = tensor::matmul(tape, kv_src, &p.w_k)?;
    let v = tensor::matmul(tape, kv_src, &p.w_v)?;

    let qh = tensor::split_heads(tape, &q, p.heads)?;
    let kh = tensor::split_heads(tape, &k, p.heads)?;
    let vh = tensor::split_heads(tape, &v, p.heads)?;

    let kt = tensor::transpose_last2(tape, &kh)?;
    let scores = tensor::bmm(tape, &qh, &kt)?;
    let scores = tensor::scale(tape, &scores, 1.0 / (p.head_dim() as f64).sqrt());
    let scores = match bias {
        Some(b) => tensor::add(tape, &scores, b)?,
        None => scores,
    };
    let attn = tensor::softmax_lastdim(tape, &scores)?;
    if let Some(t) = trace {
        t.maps.push(AttnMap {
            heads: attn.shape()[0],
            queries: attn.shape()[1],
            keys: attn.shape()[2],
            weights: attn.values().to_vec(),
        });
    }
    let ctx = tensor::bmm(tape, &attn, &vh)?;
    let merged = tensor::merge_heads(tape, &ctx)?;
    tensor::matmul(tape, &merged, &p.w_o)
}

/// Vanilla multi-head cross-attention: queries from `q_src`, keys and values
/// from `kv_src`, attention over the full token map. Per head i:
/// softmax(q k^T / sqrt(d)) v, heads concatenated, projected by w_o.
pub fn mcsa(
    tape: &mut Tape,
    q_src: &Tensor,
    kv_src: &Tensor,
    p: &AttentionParams,
    trace: Option<&mut AttnTrace>,
) -> Result<Tensor> {
    if q_src.ndim() != 2
        || kv_src.ndim() != 2
        || q_src.shape()[1] != kv_src.shape()[1]
        || q_src.shape()[0] != kv_src.shape()[0]
    {
        return Err(Error::shape("mcsa", q_src.shape(), kv_src.shape()));
    }
    p.validate_dim(q_src.shape()[1], "mcsa")?;
    if p.bias_table.is_some() {
        return Err(Error::config(
            "mcsa takes no relative position bias; use w_mcsa for windowed attention",
        ));
    }
    attention_core(tape, q_src, kv_src, p, None, trace)
}

/// Multi-head self-attention: [`mcsa`] specialized to q_src = kv_src = x.
pub fn msa(
    tape: &mut Tape,
    x: &Tensor,
    p: &AttentionParams,
    trace: Option<&mut AttnTrace>,
) -> Result<Tensor> {
    mcsa(tape, x, x, p, trace)
}

/// Window-based multi-head cross-attention.
///
/// The pooled landmark tokens (exactly M rows) supply the queries for every
/// window; keys and values come from that window's image tokens. Within a
/// window: softmax(q k^T / sqrt(d) + b) v per head, heads merged, projected
/// by w_o; window outputs are concatenated back to N tokens.
///
/// The query projection is evaluated inside each window's computation (on
/// the same pooled tokens, so all windows share identical query values, and
/// the accumulated gradient equals the project-once formulation).
pub fn w_mcsa(
    tape: &mut Tape,
    x_img: &Tensor,
    x_lm_pooled: &Tensor,
    p: &AttentionParams,
    layout: WindowLayout,
    mut trace: Option<&mut AttnTrace>,
) -> Result<Tensor> {
    if x_img.ndim() != 2 || x_lm_pooled.ndim() != 2 || x_img.shape()[1] != x_lm_pooled.shape()[1] {
        return Err(Error::shape("w_mcsa", x_img.shape(), x_lm_pooled.shape()));
    }
    p.validate_dim(x_img.shape()[1], "w_mcsa")?;
    let bias = p
        .bias_table
        .as_ref()
        .ok_or_else(|| Error::config("w_mcsa requires a relative position bias table"))?;
    let m = layout.window_tokens;
    if x_img.shape()[0] != layout.total_tokens {
        return Err(Error::layout(
            "w_mcsa",
            format!(
                "layout covers {} tokens but input has {}",
                layout.total_tokens,
                x_img.shape()[0]
            ),
        ));
    }
    if x_lm_pooled.shape()[0] != m {
        return Err(Error::layout(
            "w_mcsa",
            format!(
                "pooled landmark map has {} tokens, window size is {m}",
                x_lm_pooled.shape()[0]
            ),
        ));
    }
    if bias.shape() != [p.heads, m, m] {
        return Err(Error::shape("w_mcsa bias", bias.shape(), &[p.heads, m, m]));
    }

    let mut outputs = Vec::with_capacity(layout.num_windows);
    for w in 0..layout.num_windows {
        let x_w = tensor::slice_rows(tape, x_img, w * m, m)?;
        let out = attention_core(tape, x_lm_pooled, &x_w, p, Some(bias), trace.as_deref_mut())?;
        outputs.push(out);
    }
    tensor::concat_tokens(tape, &outputs)
}
