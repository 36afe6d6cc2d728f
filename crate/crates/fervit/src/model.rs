//! Full-architecture assembly.
//!
//! Pipeline: a small stride-pyramid convolutional backbone produces image
//! tokens at strides 8/16/32; a mirrored (by default frozen) stack produces
//! landmark feature maps at the same scales; each scale runs a cross-fusion
//! encoder (windowed by default); the per-scale outputs are projected to a
//! shared width, merged along the token dimension, passed through a small
//! stack of vanilla transformer blocks, mean-pooled, and classified.
//!
//! Variant and ablation flags reroute the assembly: the two-stream
//! reference encoder, single-scale fusion, vanilla (full-map) attention,
//! no fusion at all, or summing pooled scales instead of the integration
//! transformer.

use crate::attention::{AttnTrace, WindowLayout};
use crate::blocks::{
    cross_fusion_v1, cross_fusion_v2, transformer_block, window_grid, BlockParams, BranchToggles,
    Mode,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, Tape, Tensor};
use serde::{Deserialize, Serialize};

/// Strides of the three backbone taps, shallowest first.
pub const TAP_STRIDES: [usize; 3] = [8, 16, 32];

/// Per-stage output channels before tap overrides; stage i halves the
/// spatial size, so stage i ends at stride 2^(i+1).
pub const STAGE_RAMP: [usize; 5] = [8, 16, 32, 64, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    V2,
    V1Reference,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Fuse and classify from the deepest scale only.
    pub no_multiscale: bool,
    /// Skip the integration transformer; sum per-scale pooled features.
    pub no_vit: bool,
    /// Replace windowed cross-attention with the vanilla kernel over the
    /// full token map.
    pub no_wmcsa: bool,
    /// Skip cross-fusion; merge raw image and landmark tokens directly.
    pub no_crossfusion: bool,
    /// Drop the image-to-landmark branch (reference variant only).
    pub no_img2lm: bool,
    /// Drop the landmark-to-image branch (reference variant only).
    pub no_lm2img: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input height and width; three channels are implied. Both must be
    /// divisible by 32 so every backbone stage halves evenly.
    pub input_size: (usize, usize),
    /// How many of the deepest taps to use (1..=3).
    pub num_scales: usize,
    /// Embedding dim per used scale, shallowest first.
    pub scale_dims: Vec<usize>,
    /// Shared width after the per-scale projection, before the merge.
    pub d_model: usize,
    pub heads: usize,
    /// Window size (tokens) per used scale for the windowed kernel.
    pub window_tokens: Vec<usize>,
    /// Depth of the integration transformer.
    pub vit_depth: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub variant: Variant,
    pub ablations: Ablations,
    /// Top of the stochastic-depth schedule; rates are evenly spaced from 0
    /// to this value over the attention-bearing blocks in forward order.
    pub drop_path_max: f64,
    pub landmark_frozen: bool,
}

impl ModelConfig {
    /// Desk-scale default: 64x64 inputs, three scales, 84 merged tokens.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            input_size: (64, 64),
            num_scales: 3,
            scale_dims: vec![32, 64, 128],
            d_model: 128,
            heads: 4,
            window_tokens: vec![16, 16, 4],
            vit_depth: 2,
            num_classes: 7,
            mlp_ratio: 4,
            variant: Variant::V2,
            ablations: Ablations::default(),
            drop_path_max: 0.5,
            landmark_frozen: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!(
                "input size {h}x{w} must be divisible by 32 (stride-32 tap)"
            )));
        }
        if !(1..=3).contains(&self.num_scales) {
            return Err(Error::config(format!(
                "num_scales {} outside 1..=3",
                self.num_scales
            )));
        }
        if self.scale_dims.len() != self.num_scales {
            return Err(Error::config(format!(
                "scale_dims has {} entries for {} scales",
                self.scale_dims.len(),
                self.num_scales
            )));
        }
        if self.window_tokens.len() != self.num_scales {
            return Err(Error::config(format!(
                "window_tokens has {} entries for {} scales",
                self.window_tokens.len(),
                self.num_scales
            )));
        }
        if self.heads == 0 {
            return Err(Error::config("heads must be positive"));
        }
        for &d in &self.scale_dims {
            if d % self.heads != 0 {
                return Err(Error::config(format!(
                    "scale dim {d} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vit_depth < 1 {
            return Err(Error::config("vit_depth must be >= 1"));
        }
        if self.num_classes != 7 && self.num_classes != 8 {
            return Err(Error::config(format!(
                "num_classes {} must be 7 or 8",
                self.num_classes
            )));
        }
        if self.mlp_ratio < 1 {
            return Err(Error::config("mlp_ratio must be >= 1"));
        }
        if !(0.0..=0.5).contains(&self.drop_path_max) {
            return Err(Error::config(format!(
                "drop_path_max {} outside [0, 0.5]",
                self.drop_path_max
            )));
        }
        if (self.ablations.no_img2lm || self.ablations.no_lm2img)
            && self.variant != Variant::V1Reference
        {
            return Err(Error::config(
                "branch ablations no_img2lm/no_lm2img are only valid for the v1_reference variant",
            ));
        }
        // Window layouts must close for every scale the windowed kernel runs on.
        if self.variant == Variant::V2
            && !self.ablations.no_crossfusion
            && !self.ablations.no_wmcsa
        {
            for geom in self.used_geometry() {
                let m = self.window_tokens[geom.scale];
                if m == 0 || geom.tokens % m != 0 {
                    return Err(Error::config(format!(
                        "scale {}: {} tokens not divisible into windows of {m}",
                        geom.scale, geom.tokens
                    )));
                }
                window_grid(m, geom.grid.0, geom.grid.1).map_err(|_| {
                    Error::config(format!(
                        "scale {}: no pooling grid realizes {m} window tokens on a {}x{} map",
                        geom.scale, geom.grid.0, geom.grid.1
                    ))
                })?;
            }
        }
        Ok(())
    }

    /// Geometry of every configured scale (shallowest first).
    pub fn geometry(&self) -> Vec<ScaleGeom> {
        let (h, w) = self.input_size;
        let first_tap = 3 - self.num_scales;
        (0..self.num_scales)
            .map(|i| {
                let stride = TAP_STRIDES[first_tap + i];
                ScaleGeom {
                    scale: i,
                    stride,
                    grid: (h / stride, w / stride),
                    tokens: (h / stride) * (w / stride),
                    dim: self.scale_dims[i],
                }
            })
            .collect()
    }

    /// Geometry of the scales the forward pass actually fuses.
    pub fn used_geometry(&self) -> Vec<ScaleGeom> {
        let all = self.geometry();
        if self.ablations.no_multiscale {
            vec![*all.last().expect("at least one scale")]
        } else {
            all
        }
    }

    /// Token count after the merge stage (image stream; doubled when the
    /// landmark stream is merged too).
    pub fn merged_token_count(&self) -> usize {
        let base: usize = self.used_geometry().iter().map(|g| g.tokens).sum();
        if self.merges_landmark_stream() {
            base * 2
        } else {
            base
        }
    }

    fn merges_landmark_stream(&self) -> bool {
        self.ablations.no_crossfusion || self.variant == Variant::V1Reference
    }

    /// Stochastic-depth rates for the attention-bearing blocks in forward
    /// order: one per fused scale, then one per integration block.
    pub fn drop_path_rates(&self) -> Vec<f64> {
        let fusion_blocks = if self.ablations.no_crossfusion {
            0
        } else {
            self.used_geometry().len()
        };
        let vit_blocks = if self.ablations.no_vit { 0 } else { self.vit_depth };
        linspace(0.0, self.drop_path_max, fusion_blocks + vit_blocks)
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleGeom {
    /// Index among the used scales, shallowest first.
    pub scale: usize,
    pub stride: usize,
    /// Token grid (height, width) at this scale.
    pub grid: (usize, usize),
    pub tokens: usize,
    pub dim: usize,
}

/// Weight + bias pair for a plain affine map.
#[derive(Clone)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    pub fn init(din: usize, dout: usize, rng: &mut Rng) -> Result<LinearParams> {
        LinearParams::init_scaled(din, dout, 1.0, rng)
    }

    /// Xavier-uniform weights shrunk by `scale`; the classification head
    /// uses a small scale so freshly initialized logits are near-uniform
    /// (initial cross-entropy close to ln C).
    pub fn init_scaled(din: usize, dout: usize, scale: f64, rng: &mut Rng) -> Result<LinearParams> {
        let lim = scale * (6.0 / (din + dout) as f64).sqrt();
        Ok(LinearParams {
            w: Tensor::param(
                (0..din * dout).map(|_| rng.uniform_in(-lim, lim)).collect(),
                &[din, dout],
            )?,
            b: Tensor::param(vec![0.0; dout], &[dout])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        tensor::linear(tape, x, &self.w, &self.b)
    }
}

/// One 3x3 stride-2 convolution stage, stored in im2col form.
#[derive(Clone)]
pub struct ConvStage {
    pub w: Tensor,
    pub b: Tensor,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvStage {
    fn init(in_ch: usize, out_ch: usize, trainable: bool, rng: &mut Rng) -> Result<ConvStage> {
        let fan_in = in_ch * 9;
        let lim = (6.0 / (fan_in + out_ch) as f64).sqrt();
        let w_vals: Vec<f64> = (0..fan_in * out_ch).map(|_| rng.uniform_in(-lim, lim)).collect();
        let (w, b) = if trainable {
            (
                Tensor::param(w_vals, &[fan_in, out_ch])?,
                Tensor::param(vec![0.0; out_ch], &[out_ch])?,
            )
        } else {
            (
                Tensor::from_vec(w_vals, &[fan_in, out_ch])?,
                Tensor::from_vec(vec![0.0; out_ch], &[out_ch])?,
            )
        };
        Ok(ConvStage { w, b, in_ch, out_ch })
    }
}

/// Five-stage stride-2 convolutional stack with taps at strides 8/16/32.
#[derive(Clone)]
pub struct BackboneParams {
    pub stages: Vec<ConvStage>,
}

impl BackboneParams {
    /// `tap_dims` overrides the channel ramp at the tapped stages
    /// (shallowest used tap first).
    pub fn init(tap_dims: &[usize], trainable: bool, rng: &mut Rng) -> Result<BackboneParams> {
        let first_tap = 5 - tap_dims.len();
        let mut stages = Vec::with_capacity(5);
        let mut in_ch = 3;
        for (i, ramp) in STAGE_RAMP.iter().enumerate() {
            let out_ch = if i >= first_tap {
                tap_dims[i - first_tap]
            } else {
                *ramp
            };
            stages.push(ConvStage::init(in_ch, out_ch, trainable, rng)?);
            in_ch = out_ch;
        }
        Ok(BackboneParams { stages })
    }

    /// Run the stack; return token matrices `[N_i x D_i]` with their grids
    /// for the deepest `num_taps` stages, shallowest first.
    pub fn features(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        num_taps: usize,
    ) -> Result<Vec<(Tensor, (usize, usize))>> {
        if x.ndim() != 3 || x.shape()[0] != 3 {
            return Err(Error::shape("backbone", x.shape(), &[3, 0, 0]));
        }
        let (mut h, mut w) = (x.shape()[1], x.shape()[2]);
        let first_tap = 5 - num_taps;
        let mut taps = Vec::with_capacity(num_taps);
        let mut cur = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            let cols = tensor::im2col(tape, &cur, 3, 2, 1)?;
            let out = tensor::linear(tape, &cols, &stage.w, &stage.b)?;
            let out = tensor::gelu(tape, &out);
            h /= 2;
            w /= 2;
            if i >= first_tap {
                taps.push((out.clone(), (h, w)));
            }
            if i + 1 < self.stages.len() {
                cur = tensor::tokens_to_chw(tape, &out, (h, w))?;
            }
        }
        Ok(taps)
    }
}

/// Per-scale encoder parameters, shaped by variant and ablations.
#[derive(Clone)]
pub enum FusionParams {
    /// Windowed (or, under no_wmcsa, vanilla full-map) one-stream encoder.
    V2(BlockParams),
    /// Two-stream reference encoder.
    V1 {
        img: BlockParams,
        lm: BlockParams,
    },
}

/// Every parameter tensor of the assembled model.
#[derive(Clone)]
pub struct ModelParams {
    pub image_backbone: BackboneParams,
    pub landmark_backbone: BackboneParams,
    /// One entry per used scale; empty under no_crossfusion.
    pub fusion: Vec<FusionParams>,
    /// Image-stream projections D_i -> d_model, one per used scale.
    pub img_proj: Vec<LinearParams>,
    /// Landmark-stream projections, present only when that stream is merged.
    pub lm_proj: Vec<LinearParams>,
    pub vit: Vec<BlockParams>,
    pub head: LinearParams,
}

/// Ordered per-scale token matrices for both streams.
pub struct FeaturePyramid {
    /// Per used scale: image tokens [N_i x D_i].
    pub image_feats: Vec<Tensor>,
    /// Per used scale: landmark maps [D_i x H_i x W_i].
    pub landmark_feats: Vec<Tensor>,
}

/// Attention maps captured at the fusion stage of one forward pass.
#[derive(Debug, Default)]
pub struct ForwardTrace {
    pub scales: Vec<ScaleAttnTrace>,
}

#[derive(Debug)]
pub struct ScaleAttnTrace {
    /// Token grid of the scale the maps index into.
    pub grid: (usize, usize),
    /// Tokens per window (equals the full map for vanilla kernels).
    pub window_tokens: usize,
    pub trace: AttnTrace,
}

impl ScaleAttnTrace {
    /// Attention mass per image token, window maps laid back out over the
    /// token axis.
    pub fn token_mass(&self) -> Vec<f64> {
        let mut mass = Vec::with_capacity(self.grid.0 * self.grid.1);
        for map in &self.trace.maps {
            mass.extend(map.mass_per_key());
        }
        mass
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(cfg: ModelConfig, rng: &mut Rng) -> Result<Model> {
        cfg.validate()?;
        let geoms = cfg.used_geometry();
        let rates = cfg.drop_path_rates();

        let image_backbone = BackboneParams::init(&cfg.scale_dims, true, rng)?;
        let landmark_backbone =
            BackboneParams::init(&cfg.scale_dims, !cfg.landmark_frozen, rng)?;

        let mut fusion = Vec::new();
        if !cfg.ablations.no_crossfusion {
            for (j, geom) in geoms.iter().enumerate() {
                let rate = rates[j];
                let p = match cfg.variant {
                    Variant::V2 => {
                        let window = if cfg.ablations.no_wmcsa {
                            None
                        } else {
                            Some(cfg.window_tokens[geom.scale])
                        };
                        FusionParams::V2(BlockParams::init(
                            geom.dim,
                            cfg.heads,
                            window,
                            cfg.mlp_ratio,
                            rate,
                            rng,
                        )?)
                    }
                    Variant::V1Reference => FusionParams::V1 {
                        img: BlockParams::init(geom.dim, cfg.heads, None, cfg.mlp_ratio, rate, rng)?,
                        lm: BlockParams::init(geom.dim, cfg.heads, None, cfg.mlp_ratio, rate, rng)?,
                    },
                };
                fusion.push(p);
            }
        }

        let img_proj = geoms
            .iter()
            .map(|g| LinearParams::init(g.dim, cfg.d_model, rng))
            .collect::<Result<Vec<_>>>()?;
        let lm_proj = if cfg.merges_landmark_stream() {
            geoms
                .iter()
                .map(|g| LinearParams::init(g.dim, cfg.d_model, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        let mut vit = Vec::new();
        if !cfg.ablations.no_vit {
            let offset = if cfg.ablations.no_crossfusion { 0 } else { geoms.len() };
            for d in 0..cfg.vit_depth {
                vit.push(BlockParams::init(
                    cfg.d_model,
                    cfg.heads,
                    None,
                    cfg.mlp_ratio,
                    rates[offset + d],
                    rng,
                )?);
            }
        }

        let head = LinearParams::init_scaled(cfg.d_model, cfg.num_classes, 0.01, rng)?;

        Ok(Model {
            cfg,
            params: ModelParams {
                image_backbone,
                landmark_backbone,
                fusion,
                img_proj,
                lm_proj,
                vit,
                head,
            },
        })
    }

    /// Both backbone streams at the used scales.
    pub fn feature_pyramid(&self, tape: &mut Tape, x: &Tensor) -> Result<FeaturePyramid> {
        let geoms = self.cfg.used_geometry();
        let num_taps = self.cfg.num_scales;
        let all_img = self.params.image_backbone.features(tape, x, num_taps)?;
        let all_lm = self.params.landmark_backbone.features(tape, x, num_taps)?;
        let pick = |mut feats: Vec<(Tensor, (usize, usize))>| {
            if self.cfg.ablations.no_multiscale {
                vec![feats.pop().expect("at least one tap")]
            } else {
                feats
            }
        };
        let image_feats = pick(all_img).into_iter().map(|(t, _)| t).collect();
        let landmark_feats = pick(all_lm)
            .into_iter()
            .zip(&geoms)
            .map(|((t, grid), _)| tensor::tokens_to_chw(tape, &t, grid))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid {
            image_feats,
            landmark_feats,
        })
    }

    /// One image through the whole pipeline to class logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
        rng: &mut Rng,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Tensor> {
        let (h, w) = self.cfg.input_size;
        if x.shape() != [3, h, w] {
            return Err(Error::config(format!(
                "input shape {:?} does not match configured {}x{}",
                x.shape(),
                h,
                w
            )));
        }
        let geoms = self.cfg.used_geometry();
        let pyramid = self.feature_pyramid(tape, x)?;

        // Per-scale fusion, then projection to the shared width.
        let mut merged_parts: Vec<Tensor> = Vec::new();
        let mut scale_parts: Vec<Vec<Tensor>> = Vec::new();
        for (j, geom) in geoms.iter().enumerate() {
            let img = &pyramid.image_feats[j];
            let lm_map = &pyramid.landmark_feats[j];
            let mut parts = Vec::new();

            let mut scale_trace = trace
                .as_deref_mut()
                .map(|_| AttnTrace::default());

            match (&self.cfg.ablations.no_crossfusion, self.cfg.variant) {
                (true, _) => {
                    let lm_tokens = tensor::chw_to_tokens(tape, lm_map)?;
                    parts.push(self.params.img_proj[j].forward(tape, img)?);
                    parts.push(self.params.lm_proj[j].forward(tape, &lm_tokens)?);
                }
                (false, Variant::V2) => {
                    let p = match &self.params.fusion[j] {
                        FusionParams::V2(p) => p,
                        FusionParams::V1 { .. } => {
                            return Err(Error::config("variant/params mismatch"))
                        }
                    };
                    let fused = if self.cfg.ablations.no_wmcsa {
                        // Vanilla kernel at full-map window: the
                        // landmark-to-image half of the reference encoder.
                        let lm_tokens = tensor::chw_to_tokens(tape, lm_map)?;
                        let (img_o, _) = cross_fusion_v1(
                            tape,
                            img,
                            &lm_tokens,
                            p,
                            p,
                            BranchToggles {
                                lm_to_img: true,
                                img_to_lm: false,
                            },
                            mode,
                            rng,
                            scale_trace.as_mut(),
                        )?;
                        img_o
                    } else {
                        let layout =
                            WindowLayout::new(geom.tokens, self.cfg.window_tokens[geom.scale])?;
                        cross_fusion_v2(
                            tape,
                            img,
                            lm_map,
                            p,
                            layout,
                            mode,
                            rng,
                            scale_trace.as_mut(),
                        )?
                    };
                    parts.push(self.params.img_proj[j].forward(tape, &fused)?);
                }
                (false, Variant::V1Reference) => {
                    let (p_img, p_lm) = match &self.params.fusion[j] {
                        FusionParams::V1 { img, lm } => (img, lm),
                        FusionParams::V2(_) => {
                            return Err(Error::config("variant/params mismatch"))
                        }
                    };
                    let lm_tokens = tensor::chw_to_tokens(tape, lm_map)?;
                    let branches = BranchToggles {
                        lm_to_img: !self.cfg.ablations.no_lm2img,
                        img_to_lm: !self.cfg.ablations.no_img2lm,
                    };
                    let (img_o, lm_o) = cross_fusion_v1(
                        tape,
                        img,
                        &lm_tokens,
                        p_img,
                        p_lm,
                        branches,
                        mode,
                        rng,
                        scale_trace.as_mut(),
                    )?;
                    parts.push(self.params.img_proj[j].forward(tape, &img_o)?);
                    parts.push(self.params.lm_proj[j].forward(tape, &lm_o)?);
                }
            }

            if let (Some(t), Some(st)) = (trace.as_deref_mut(), scale_trace) {
                t.scales.push(ScaleAttnTrace {
                    grid: geom.grid,
                    window_tokens: if self.cfg.variant == Variant::V2
                        && !self.cfg.ablations.no_wmcsa
                        && !self.cfg.ablations.no_crossfusion
                    {
                        self.cfg.window_tokens[geom.scale]
                    } else {
                        geom.tokens
                    },
                    trace: st,
                });
            }

            merged_parts.extend(parts.iter().cloned());
            scale_parts.push(parts);
        }

        // Integration: merge in the token dimension and run the small
        // transformer, or (no_vit) mean-pool each scale and sum.
        let pooled = if self.cfg.ablations.no_vit {
            let mut acc: Option<Tensor> = None;
            for parts in &scale_parts {
                let scale_tokens = tensor::concat_tokens(tape, parts)?;
                let pooled = tensor::mean_pool_tokens(tape, &scale_tokens)?;
                acc = Some(match acc {
                    Some(a) => tensor::add(tape, &a, &pooled)?,
                    None => pooled,
                });
            }
            acc.expect("at least one scale")
        } else {
            let mut tokens = tensor::concat_tokens(tape, &merged_parts)?;
            for block in &self.params.vit {
                tokens = transformer_block(tape, &tokens, block, mode, rng, None)?;
            }
            tensor::mean_pool_tokens(tape, &tokens)?
        };

        let pooled_row = tensor::reshape(tape, &pooled, &[1, self.cfg.d_model])?;
        let logits = self.params.head.forward(tape, &pooled_row)?;
        tensor::reshape(tape, &logits, &[self.cfg.num_classes])
    }

    /// Eval-mode logits with no recording; the rng is never consumed.
    pub fn eval_logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let mut rng = Rng::new(0);
        let logits = self.forward(&mut tape, x, Mode::Eval, &mut rng, None)?;
        Ok(logits.values().to_vec())
    }

    /// Visit every parameter tensor with its dotted path, in a stable order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_model(&self.params, &mut |path, t| f(path, t));
    }

    /// Mutable visit; the optimizer replaces tensors through this.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_model_mut(&mut self.params, f);
    }

    /// Exhaustive per-tensor parameter census.
    pub fn census(&self) -> Census {
        let mut entries = Vec::new();
        self.visit_params(&mut |path, t| {
            entries.push(CensusEntry {
                path: path.to_string(),
                count: t.numel(),
                frozen: !t.requires_grad(),
            });
        });
        Census { entries }
    }
}

fn visit_block(prefix: &str, p: &BlockParams, f: &mut dyn FnMut(&str, &Tensor)) {
    f(&format!("{prefix}.attn.w_q"), &p.attn.w_q);
    f(&format!("{prefix}.attn.w_k"), &p.attn.w_k);
    f(&format!("{prefix}.attn.w_v"), &p.attn.w_v);
    f(&format!("{prefix}.attn.w_o"), &p.attn.w_o);
    if let Some(b) = &p.attn.bias_table {
        f(&format!("{prefix}.attn.bias_table"), b);
    }
    f(&format!("{prefix}.mlp.w1"), &p.mlp.w1);
    f(&format!("{prefix}.mlp.b1"), &p.mlp.b1);
    f(&format!("{prefix}.mlp.w2"), &p.mlp.w2);
    f(&format!("{prefix}.mlp.b2"), &p.mlp.b2);
    f(&format!("{prefix}.norm.gamma"), &p.norm.gamma);
    f(&format!("{prefix}.norm.beta"), &p.norm.beta);
}

fn visit_block_mut(prefix: &str, p: &mut BlockParams, f: &mut dyn FnMut(&str, &mut Tensor)) {
    f(&format!("{prefix}.attn.w_q"), &mut p.attn.w_q);
    f(&format!("{prefix}.attn.w_k"), &mut p.attn.w_k);
    f(&format!("{prefix}.attn.w_v"), &mut p.attn.w_v);
    f(&format!("{prefix}.attn.w_o"), &mut p.attn.w_o);
    if let Some(b) = &mut p.attn.bias_table {
        f(&format!("{prefix}.attn.bias_table"), b);
    }
    f(&format!("{prefix}.mlp.w1"), &mut p.mlp.w1);
    f(&format!("{prefix}.mlp.b1"), &mut p.mlp.b1);
    f(&format!("{prefix}.mlp.w2"), &mut p.mlp.w2);
    f(&format!("{prefix}.mlp.b2"), &mut p.mlp.b2);
    f(&format!("{prefix}.norm.gamma"), &mut p.norm.gamma);
    f(&format!("{prefix}.norm.beta"), &mut p.norm.beta);
}

fn visit_model(p: &ModelParams, f: &mut dyn FnMut(&str, &Tensor)) {
    for (branch, backbone) in [
        ("image_backbone", &p.image_backbone),
        ("landmark_backbone", &p.landmark_backbone),
    ] {
        for (i, stage) in backbone.stages.iter().enumerate() {
            f(&format!("{branch}.stage{i}.w"), &stage.w);
            f(&format!("{branch}.stage{i}.b"), &stage.b);
        }
    }
    for (j, fusion) in p.fusion.iter().enumerate() {
        match fusion {
            FusionParams::V2(b) => visit_block(&format!("fusion.scale{j}"), b, f),
            FusionParams::V1 { img, lm } => {
                visit_block(&format!("fusion.scale{j}.img"), img, f);
                visit_block(&format!("fusion.scale{j}.lm"), lm, f);
            }
        }
    }
    for (j, proj) in p.img_proj.iter().enumerate() {
        f(&format!("img_proj.scale{j}.w"), &proj.w);
        f(&format!("img_proj.scale{j}.b"), &proj.b);
    }
    for (j, proj) in p.lm_proj.iter().enumerate() {
        f(&format!("lm_proj.scale{j}.w"), &proj.w);
        f(&format!("lm_proj.scale{j}.b"), &proj.b);
    }
    for (d, block) in p.vit.iter().enumerate() {
        visit_block(&format!("vit.block{d}"), block, f);
    }
    f("head.w", &p.head.w);
    f("head.b", &p.head.b);
}

fn visit_model_mut(p: &mut ModelParams, f: &mut dyn FnMut(&str, &mut Tensor)) {
    for (branch, backbone) in [
        ("image_backbone", &mut p.image_backbone),
        ("landmark_backbone", &mut p.landmark_backbone),
    ] {
        for (i, stage) in backbone.stages.iter_mut().enumerate() {
            f(&format!("{branch}.stage{i}.w"), &mut stage.w);
            f(&format!("{branch}.stage{i}.b"), &mut stage.b);
        }
    }
    for (j, fusion) in p.fusion.iter_mut().enumerate() {
        match fusion {
            FusionParams::V2(b) => visit_block_mut(&format!("fusion.scale{j}"), b, f),
            FusionParams::V1 { img, lm } => {
                visit_block_mut(&format!("fusion.scale{j}.img"), img, f);
                visit_block_mut(&format!("fusion.scale{j}.lm"), lm, f);
            }
        }
    }
    for (j, proj) in p.img_proj.iter_mut().enumerate() {
        f(&format!("img_proj.scale{j}.w"), &mut proj.w);
        f(&format!("img_proj.scale{j}.b"), &mut proj.b);
    }
    for (j, proj) in p.lm_proj.iter_mut().enumerate() {
        f(&format!("lm_proj.scale{j}.w"), &mut proj.w);
        f(&format!("lm_proj.scale{j}.b"), &mut proj.b);
    }
    for (d, block) in p.vit.iter_mut().enumerate() {
        visit_block_mut(&format!("vit.block{d}"), block, f);
    }
    f("head.w", &mut p.head.w);
    f("head.b", &mut p.head.b);
}

/// Exhaustive enumeration of parameter tensors by module path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Census {
    pub entries: Vec<CensusEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CensusEntry {
    pub path: String,
    pub count: usize,
    pub frozen: bool,
}

impl Census {
    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn trainable(&self) -> usize {
        self.entries.iter().filter(|e| !e.frozen).map(|e| e.count).sum()
    }

    pub fn frozen(&self) -> usize {
        self.entries.iter().filter(|e| e.frozen).map(|e| e.count).sum()
    }

    /// Sum of counts under a dotted path prefix.
    pub fn under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.path == prefix || e.path.starts_with(&format!("{prefix}.")))
            .map(|e| e.count)
            .sum()
    }
}
