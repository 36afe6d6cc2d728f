//! Complexity accounting: closed-form multiply-accumulate costs for the
//! attention kernels, an instrumented counter as ground truth, a full-model
//! parameter/MAC rollup, and an empirical wall-clock scaling fit.
//!
//! Conventions: counts are multiply-accumulates (MACs) over matrix products
//! only; softmax, normalization, GELU and bias additions are excluded.
//! Reports print both the MAC total and the doubled convention
//! (1 MAC = 2 FLOPs).

use crate::attention::{self, AttentionParams, WindowLayout};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant, STAGE_RAMP};
use crate::parallel;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Vanilla cross-attention cost: 4ND^2 for the four projections plus 2N^2 D
/// for the two attention contractions. Quadratic in tokens.
pub fn analytic_mcsa_cost(tokens: u64, dim: u64) -> u64 {
    4 * tokens * dim * dim + 2 * tokens * tokens * dim
}

/// Windowed cross-attention cost under the tokens-per-window reading:
/// each of the N/M windows runs a full attention over M tokens, so
/// 4ND^2 + 2*M*N*D. Linear in tokens for fixed M.
pub fn analytic_wmcsa_cost(tokens: u64, dim: u64, window_tokens: u64) -> Result<u64> {
    if window_tokens == 0 || !tokens.is_multiple_of(window_tokens) {
        return Err(Error::layout(
            "analytic_wmcsa_cost",
            format!("{tokens} tokens not divisible into windows of {window_tokens}"),
        ));
    }
    Ok(4 * tokens * dim * dim + 2 * window_tokens * tokens * dim)
}

/// The literal 2M^2ND reading of the windowed-cost formula, exposed for
/// side-by-side comparison; it treats M as a window side length rather than
/// a token count and overstates the attention term by a factor of M.
pub fn analytic_wmcsa_cost_literal(tokens: u64, dim: u64, window_tokens: u64) -> u64 {
    4 * tokens * dim * dim + 2 * window_tokens * window_tokens * tokens * dim
}

/// Run a kernel under a counting tape and return the multiply-accumulates
/// it actually executed.
pub fn instrumented_macs<F>(kernel: F) -> Result<u64>
where
    F: FnOnce(&mut Tape) -> Result<()>,
{
    let mut tape = Tape::no_grad().with_mac_counting();
    kernel(&mut tape)?;
    Ok(tape.macs())
}

/// Counted MACs of one vanilla cross-attention run on seeded inputs.
pub fn instrumented_mcsa_macs(tokens: usize, dim: usize, heads: usize, seed: u64) -> Result<u64> {
    let mut rng = Rng::new(seed);
    let p = AttentionParams::init(dim, heads, None, &mut rng)?;
    let q_src = Tensor::rand_uniform(&[tokens, dim], -1.0, 1.0, &mut rng);
    let kv_src = Tensor::rand_uniform(&[tokens, dim], -1.0, 1.0, &mut rng);
    instrumented_macs(|tape| {
        attention::mcsa(tape, &q_src, &kv_src, &p, None)?;
        Ok(())
    })
}

/// Counted MACs of one windowed cross-attention run on seeded inputs.
pub fn instrumented_wmcsa_macs(
    tokens: usize,
    dim: usize,
    window_tokens: usize,
    heads: usize,
    seed: u64,
) -> Result<u64> {
    let mut rng = Rng::new(seed);
    let p = AttentionParams::init(dim, heads, Some(window_tokens), &mut rng)?;
    let layout = WindowLayout::new(tokens, window_tokens)?;
    let x_img = Tensor::rand_uniform(&[tokens, dim], -1.0, 1.0, &mut rng);
    let z_lm = Tensor::rand_uniform(&[window_tokens, dim], -1.0, 1.0, &mut rng);
    instrumented_macs(|tape| {
        attention::w_mcsa(tape, &x_img, &z_lm, &p, layout, None)?;
        Ok(())
    })
}

/// One module's analytic parameter and forward-MAC counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub module: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    pub macs: u64,
    /// Doubled convention: 1 MAC = 2 FLOPs.
    pub flops_2x_macs: u64,
}

/// Analytic cost rollup for one configuration (single-image forward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: ModelConfig,
    pub entries: Vec<CostEntry>,
    pub totals: CostTotals,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn block_params(dim: u64, mlp_ratio: u64, bias_window: Option<u64>, heads: u64) -> u64 {
    let attn = 4 * dim * dim + bias_window.map_or(0, |m| heads * m * m);
    let hidden = dim * mlp_ratio;
    let mlp = dim * hidden + hidden + hidden * dim + dim;
    let norm = 2 * dim;
    attn + mlp + norm
}

fn mlp_macs(tokens: u64, dim: u64, mlp_ratio: u64) -> u64 {
    2 * tokens * dim * dim * mlp_ratio
}

/// Analytic per-module parameter and MAC rollup, derived from the
/// configuration alone. The parameter totals are checked elsewhere against
/// the exhaustive census of a real parameter set.
pub fn model_cost(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let mut entries: Vec<CostEntry> = Vec::new();
    let (h, w) = cfg.input_size;
    let heads = cfg.heads as u64;
    let ratio = cfg.mlp_ratio as u64;
    let d_model = cfg.d_model as u64;

    // Backbones: five stride-2 stages, taps override the channel ramp.
    let first_tap = 5 - cfg.num_scales;
    for branch in ["image_backbone", "landmark_backbone"] {
        let mut params = 0u64;
        let mut macs = 0u64;
        let mut in_ch = 3u64;
        let (mut sh, mut sw) = (h as u64, w as u64);
        for (i, ramp) in STAGE_RAMP.iter().enumerate() {
            let out_ch = if i >= first_tap {
                cfg.scale_dims[i - first_tap] as u64
            } else {
                *ramp as u64
            };
            sh /= 2;
            sw /= 2;
            params += in_ch * 9 * out_ch + out_ch;
            macs += sh * sw * in_ch * 9 * out_ch;
            in_ch = out_ch;
        }
        entries.push(CostEntry {
            module: branch.to_string(),
            params,
            macs,
        });
    }

    let geoms = cfg.used_geometry();
    let merges_lm = cfg.ablations.no_crossfusion || cfg.variant == Variant::V1Reference;

    if !cfg.ablations.no_crossfusion {
        for (j, geom) in geoms.iter().enumerate() {
            let n = geom.tokens as u64;
            let d = geom.dim as u64;
            let (params, macs) = match cfg.variant {
                Variant::V2 => {
                    if cfg.ablations.no_wmcsa {
                        (
                            block_params(d, ratio, None, heads),
                            analytic_mcsa_cost(n, d) + mlp_macs(n, d, ratio),
                        )
                    } else {
                        let m = cfg.window_tokens[geom.scale] as u64;
                        (
                            block_params(d, ratio, Some(m), heads),
                            analytic_wmcsa_cost(n, d, m)? + mlp_macs(n, d, ratio),
                        )
                    }
                }
                Variant::V1Reference => {
                    let lm2img = !cfg.ablations.no_lm2img;
                    let img2lm = !cfg.ablations.no_img2lm;
                    let per_branch = analytic_mcsa_cost(n, d) + mlp_macs(n, d, ratio);
                    let active = lm2img as u64 + img2lm as u64;
                    // Both branches' parameters exist regardless of toggles.
                    (2 * block_params(d, ratio, None, heads), active * per_branch)
                }
            };
            entries.push(CostEntry {
                module: format!("fusion.scale{j}"),
                params,
                macs,
            });
        }
    }

    for (j, geom) in geoms.iter().enumerate() {
        let n = geom.tokens as u64;
        let d = geom.dim as u64;
        entries.push(CostEntry {
            module: format!("img_proj.scale{j}"),
            params: d * d_model + d_model,
            macs: n * d * d_model,
        });
        if merges_lm {
            entries.push(CostEntry {
                module: format!("lm_proj.scale{j}"),
                params: d * d_model + d_model,
                macs: n * d * d_model,
            });
        }
    }

    if !cfg.ablations.no_vit {
        let t = cfg.merged_token_count() as u64;
        for dpt in 0..cfg.vit_depth {
            entries.push(CostEntry {
                module: format!("vit.block{dpt}"),
                params: block_params(d_model, ratio, None, heads),
                macs: analytic_mcsa_cost(t, d_model) + mlp_macs(t, d_model, ratio),
            });
        }
    }

    entries.push(CostEntry {
        module: "head".to_string(),
        params: d_model * cfg.num_classes as u64 + cfg.num_classes as u64,
        macs: d_model * cfg.num_classes as u64,
    });

    let params: u64 = entries.iter().map(|e| e.params).sum();
    let macs: u64 = entries.iter().map(|e| e.macs).sum();
    Ok(CostReport {
        config: cfg.clone(),
        entries,
        totals: CostTotals {
            params,
            macs,
            flops_2x_macs: 2 * macs,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Mcsa,
    WMcsa,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<KernelKind> {
        match s {
            "mcsa" => Ok(KernelKind::Mcsa),
            "w_mcsa" | "wmcsa" => Ok(KernelKind::WMcsa),
            other => Err(Error::config(format!("unknown kernel '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub tokens: usize,
    pub median_ns: u128,
}

/// Median wall times over a token sweep with a log-log slope fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub kernel: KernelKind,
    pub dim: usize,
    pub window_tokens: usize,
    pub heads: usize,
    pub reps: usize,
    pub points: Vec<ScalePoint>,
    pub slope: f64,
}

impl ScalingReport {
    /// CSV rows: tokens, median wall nanoseconds, repetitions.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tokens,median_ns,reps\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.tokens, p.median_ns, self.reps));
        }
        out
    }
}

/// Time one kernel across a token sweep and fit the log-log slope of the
/// median wall time. Runs pinned to a single worker so parallel kernel
/// dispatch cannot distort the fit.
pub fn bench_scaling(
    kernel: KernelKind,
    sweep: &[usize],
    dim: usize,
    window_tokens: usize,
    heads: usize,
    reps: usize,
    seed: u64,
) -> Result<ScalingReport> {
    if sweep.len() < 2 {
        return Err(Error::contract("bench_scaling", "sweep needs at least two sizes"));
    }
    if reps == 0 {
        return Err(Error::contract("bench_scaling", "reps must be positive"));
    }
    let points = parallel::run_single_threaded(|| -> Result<Vec<ScalePoint>> {
        let mut points = Vec::with_capacity(sweep.len());
        for &tokens in sweep {
            let mut rng = Rng::new(seed ^ tokens as u64);
            let median_ns = match kernel {
                KernelKind::Mcsa => {
                    let p = AttentionParams::init(dim, heads, None, &mut rng)?;
                    let q_src = Tensor::rand_uniform(&[tokens, dim], -1.0, 1.0, &mut rng);
                    let kv_src = Tensor::rand_uniform(&[tokens, dim], -1.0, 1.0, &mut rng);
                    time_median(reps, || {
                        let mut tape = Tape::no_grad();
                        attention::mcsa(&mut tape, &q_src, &kv_src, &p, None).map(|_| ())
                    })?
                }
                KernelKind::WMcsa => {
                    let p = AttentionParams::init(dim, heads, Some(window_tokens), &mut rng)?;
                    let layout = WindowLayout::new(tokens, window_tokens)?;
                    let x_img = Tensor::rand_uniform(&[tokens, dim], -1.0, 1.0, &mut rng);
                    let z_lm = Tensor::rand_uniform(&[window_tokens, dim], -1.0, 1.0, &mut rng);
                    time_median(reps, || {
                        let mut tape = Tape::no_grad();
                        attention::w_mcsa(&mut tape, &x_img, &z_lm, &p, layout, None).map(|_| ())
                    })?
                }
            };
            points.push(ScalePoint { tokens, median_ns });
        }
        Ok(points)
    })?;

    let xs: Vec<f64> = points.iter().map(|p| (p.tokens as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| (p.median_ns as f64).ln()).collect();
    let slope = least_squares_slope(&xs, &ys);
    Ok(ScalingReport {
        kernel,
        dim,
        window_tokens,
        heads,
        reps,
        points,
        slope,
    })
}

fn time_median(reps: usize, mut run: impl FnMut() -> Result<()>) -> Result<u128> {
    run()?; // warmup, untimed
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_nanos());
    }
    times.sort_unstable();
    Ok(times[times.len() / 2])
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// The published full-scale figures for this architecture, for report
/// context only; the toy desk-scale stack does not reproduce them.
pub const PUBLISHED_FULL_SCALE_PARAMS: &str = "43.7M";
pub const PUBLISHED_FULL_SCALE_FLOPS: &str = "8.4G";
