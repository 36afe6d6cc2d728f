//! Transformer building blocks.
//!
//! The residual structure is the same everywhere: the attention branch is
//! added to the input un-normed, then the MLP branch is pre-normed,
//!
//! ```text
//! x' = drop_path(attention(x)) + x
//! out = drop_path(mlp(norm(x'))) + x'
//! ```
//!
//! [`transformer_block`] uses self-attention (the integration stage),
//! [`cross_fusion_v2`] uses window-based cross-attention from a pooled
//! landmark map (the one-stream encoder), and [`cross_fusion_v1`] is the
//! bidirectional two-stream reference encoder with vanilla cross-attention
//! in both directions.

use crate::attention::{self, AttentionParams, AttnTrace, WindowLayout};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, Tape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Forward mode: stochastic depth is active only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Two-layer MLP D -> r*D -> D with GELU in between.
#[derive(Clone)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpParams {
    pub fn init(dim: usize, ratio: usize, rng: &mut Rng) -> Result<MlpParams> {
        if ratio < 1 {
            return Err(Error::config("mlp expansion ratio must be >= 1"));
        }
        let hidden = dim * ratio;
        let lim = (6.0 / (dim + hidden) as f64).sqrt();
        let w1 = Tensor::param(
            (0..dim * hidden).map(|_| rng.uniform_in(-lim, lim)).collect(),
            &[dim, hidden],
        )?;
        let w2 = Tensor::param(
            (0..hidden * dim).map(|_| rng.uniform_in(-lim, lim)).collect(),
            &[hidden, dim],
        )?;
        Ok(MlpParams {
            w1,
            b1: Tensor::param(vec![0.0; hidden], &[hidden])?,
            w2,
            b2: Tensor::param(vec![0.0; dim], &[dim])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let h = tensor::linear(tape, x, &self.w1, &self.b1)?;
        let h = tensor::gelu(tape, &h);
        tensor::linear(tape, &h, &self.w2, &self.b2)
    }
}

/// Layer-norm affine parameters, initialized to the identity map.
#[derive(Clone)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl NormParams {
    pub fn init(dim: usize) -> Result<NormParams> {
        Ok(NormParams {
            gamma: Tensor::param(vec![1.0; dim], &[dim])?,
            beta: Tensor::param(vec![0.0; dim], &[dim])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        tensor::layer_norm(tape, x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

/// One block's parameters: attention projections, the MLP, the pre-MLP norm,
/// and the stochastic-depth rate for both residual branches.
#[derive(Clone)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub mlp: MlpParams,
    pub norm: NormParams,
    pub drop_path_rate: f64,
}

impl BlockParams {
    pub fn init(
        dim: usize,
        heads: usize,
        window_tokens: Option<usize>,
        mlp_ratio: usize,
        drop_path_rate: f64,
        rng: &mut Rng,
    ) -> Result<BlockParams> {
        if !(0.0..=0.5).contains(&drop_path_rate) {
            return Err(Error::config(format!(
                "drop_path_rate {drop_path_rate} outside [0, 0.5]"
            )));
        }
        Ok(BlockParams {
            attn: AttentionParams::init(dim, heads, window_tokens, rng)?,
            mlp: MlpParams::init(dim, mlp_ratio, rng)?,
            norm: NormParams::init(dim)?,
            drop_path_rate,
        })
    }
}

/// Stochastic depth on a residual branch. In train mode the branch is zeroed
/// with probability `rate` and survivors are rescaled by 1/(1-rate); one
/// decision per call, which is one decision per sample in this codebase
/// (forward passes are per sample). Eval mode and rate 0 are the identity
/// and do not consume randomness.
pub fn drop_path(
    tape: &mut Tape,
    x: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(
            "drop_path",
            format!("rate {rate} outside [0, 1)"),
        ));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    if rng.bernoulli(rate) {
        Ok(tensor::scale(tape, x, 0.0))
    } else {
        Ok(tensor::scale(tape, x, 1.0 / (1.0 - rate)))
    }
}

/// Residual wrapper shared by all blocks: out = drop_path(branch) + base.
fn residual(
    tape: &mut Tape,
    branch: &Tensor,
    base: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor> {
    let dropped = drop_path(tape, branch, rate, mode, rng)?;
    tensor::add(tape, &dropped, base)
}

/// Vanilla transformer block with multi-head self-attention.
pub fn transformer_block(
    tape: &mut Tape,
    x: &Tensor,
    p: &BlockParams,
    mode: Mode,
    rng: &mut Rng,
    trace: Option<&mut AttnTrace>,
) -> Result<Tensor> {
    let attn = attention::msa(tape, x, &p.attn, trace)?;
    let x1 = residual(tape, &attn, x, p.drop_path_rate, mode, rng)?;
    let normed = p.norm.forward(tape, &x1)?;
    let mlp = p.mlp.forward(tape, &normed)?;
    residual(tape, &mlp, &x1, p.drop_path_rate, mode, rng)
}

/// One-stream cross-fusion encoder: the landmark map is pooled to window
/// size and drives window-based cross-attention over the image tokens.
///
/// `x_lm` is the raw [C,H,W] landmark map with C equal to the token dim.
#[allow(clippy::too_many_arguments)]
pub fn cross_fusion_v2(
    tape: &mut Tape,
    x_img: &Tensor,
    x_lm: &Tensor,
    p: &BlockParams,
    layout: WindowLayout,
    mode: Mode,
    rng: &mut Rng,
    trace: Option<&mut AttnTrace>,
) -> Result<Tensor> {
    if x_lm.ndim() != 3 || x_lm.shape()[0] != x_img.shape()[1] {
        return Err(Error::shape("cross_fusion_v2", x_lm.shape(), x_img.shape()));
    }
    let grid = window_grid(layout.window_tokens, x_lm.shape()[1], x_lm.shape()[2])?;
    let z_lm = attention::downsample_landmark(tape, x_lm, grid)?;
    let attn = attention::w_mcsa(tape, x_img, &z_lm, &p.attn, layout, trace)?;
    let x1 = residual(tape, &attn, x_img, p.drop_path_rate, mode, rng)?;
    let normed = p.norm.forward(tape, &x1)?;
    let mlp = p.mlp.forward(tape, &normed)?;
    residual(tape, &mlp, &x1, p.drop_path_rate, mode, rng)
}

/// Which of the two reference-encoder branches are active.
#[derive(Debug, Clone, Copy)]
pub struct BranchToggles {
    /// Landmark queries attend over image tokens (updates the image stream).
    pub lm_to_img: bool,
    /// Image queries attend over landmark tokens (updates the landmark stream).
    pub img_to_lm: bool,
}

impl Default for BranchToggles {
    fn default() -> Self {
        BranchToggles {
            lm_to_img: true,
            img_to_lm: true,
        }
    }
}

/// Two-stream bidirectional cross-fusion encoder (the reference variant).
/// Both streams carry N x D tokens; each enabled branch applies vanilla
/// cross-attention with the other stream's queries, then the usual MLP
/// residual. A disabled branch passes its stream through unchanged.
#[allow(clippy::too_many_arguments)]
pub fn cross_fusion_v1(
    tape: &mut Tape,
    x_img: &Tensor,
    x_lm: &Tensor,
    p_img: &BlockParams,
    p_lm: &BlockParams,
    branches: BranchToggles,
    mode: Mode,
    rng: &mut Rng,
    mut trace: Option<&mut AttnTrace>,
) -> Result<(Tensor, Tensor)> {
    if x_img.shape() != x_lm.shape() {
        return Err(Error::shape("cross_fusion_v1", x_img.shape(), x_lm.shape()));
    }
    let img_out = if branches.lm_to_img {
        let attn = attention::mcsa(tape, x_lm, x_img, &p_img.attn, trace.as_deref_mut())?;
        let x1 = residual(tape, &attn, x_img, p_img.drop_path_rate, mode, rng)?;
        let normed = p_img.norm.forward(tape, &x1)?;
        let mlp = p_img.mlp.forward(tape, &normed)?;
        residual(tape, &mlp, &x1, p_img.drop_path_rate, mode, rng)?
    } else {
        x_img.clone()
    };
    let lm_out = if branches.img_to_lm {
        let attn = attention::mcsa(tape, x_img, x_lm, &p_lm.attn, trace)?;
        let x1 = residual(tape, &attn, x_lm, p_lm.drop_path_rate, mode, rng)?;
        let normed = p_lm.norm.forward(tape, &x1)?;
        let mlp = p_lm.mlp.forward(tape, &normed)?;
        residual(tape, &mlp, &x1, p_lm.drop_path_rate, mode, rng)?
    } else {
        x_lm.clone()
    };
    Ok((img_out, lm_out))
}

/// Choose a spatial (h, w) grid with h*w = window_tokens that divides the
/// landmark map evenly, preferring the most square factorization.
pub fn window_grid(window_tokens: usize, map_h: usize, map_w: usize) -> Result<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    for h in 1..=window_tokens {
        if !window_tokens.is_multiple_of(h) {
            continue;
        }
        let w = window_tokens / h;
        if !map_h.is_multiple_of(h) || !map_w.is_multiple_of(w) {
            continue;
        }
        let squarer = |&(a, b): &(usize, usize)| a.abs_diff(b);
        if best.is_none() || squarer(&(h, w)) < squarer(best.as_ref().unwrap()) {
            best = Some((h, w));
        }
    }
    best.ok_or_else(|| {
        Error::layout(
            "window_grid",
            format!("no (h, w) with h*w = {window_tokens} divides a {map_h}x{map_w} map"),
        )
    })
}
