//! Registry of finite-difference gradient checks over every differentiable
//! op, every composite block, and the assembled model. Backs the gradcheck
//! command and the acceptance suite.

use crate::attention::{self, AttentionParams, WindowLayout};
use crate::blocks::{
    cross_fusion_v1, cross_fusion_v2, transformer_block, BlockParams, BranchToggles, MlpParams,
    Mode, NormParams,
};
use crate::data;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::Rng;
use crate::tensor::{self, finite_diff_grad, finite_diff_grad_at, max_rel_err, Tape, Tensor};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Elementary tensor ops.
    Ops,
    /// Composite transformer blocks.
    Blocks,
    /// The assembled desk-scale model, sampled per tensor.
    Model,
    All,
}

impl std::str::FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Scope> {
        match s {
            "ops" => Ok(Scope::Ops),
            "blocks" => Ok(Scope::Blocks),
            "model" => Ok(Scope::Model),
            "all" => Ok(Scope::All),
            other => Err(Error::config(format!("unknown gradcheck scope '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// Check one leaf of a scalar-valued graph against central differences.
fn check_leaf<F>(name: &str, x0: &Tensor, build: F, out: &mut Vec<CheckResult>) -> Result<()>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let x = x0.with_requires_grad(true);
    let mut tape = Tape::new();
    let loss = build(&mut tape, &x)?;
    tape.backward(&loss)?;
    let analytic = x
        .grad()
        .ok_or_else(|| Error::contract("gradcheck", format!("no gradient reached {name}")))?;
    let numeric = finite_diff_grad(
        |xt| {
            let mut t = Tape::no_grad();
            build(&mut t, xt)?.scalar()
        },
        x0,
        STEP,
    )?;
    out.push(CheckResult {
        name: name.to_string(),
        max_rel_err: max_rel_err(&analytic, numeric.values()),
    });
    Ok(())
}

/// Squared-sum readout: every output element gets a distinct gradient.
fn sq_sum(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let sq = tensor::mul(tape, x, x)?;
    Ok(tensor::sum_all(tape, &sq))
}

fn op_checks(out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::new(0xfe11);
    let x34 = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let other34 = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let b43 = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let w45 = Tensor::rand_uniform(&[4, 5], -1.0, 1.0, &mut rng);
    let bias5 = Tensor::rand_uniform(&[5], -1.0, 1.0, &mut rng);
    let gamma = Tensor::rand_uniform(&[4], 0.5, 1.5, &mut rng);
    let beta = Tensor::rand_uniform(&[4], -0.5, 0.5, &mut rng);
    let batch_a = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let batch_b = Tensor::rand_uniform(&[2, 4, 3], -1.0, 1.0, &mut rng);
    let img = Tensor::rand_uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
    let logits = Tensor::rand_uniform(&[3, 5], -1.0, 1.0, &mut rng);
    let labels = [1usize, 4, 0];

    check_leaf("matmul/lhs", &x34, |t, x| {
        let y = tensor::matmul(t, x, &b43)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("matmul/rhs", &b43, |t, b| {
        let y = tensor::matmul(t, &x34, b)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("bmm/lhs", &batch_a, |t, a| {
        let y = tensor::bmm(t, a, &batch_b)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("bmm/rhs", &batch_b, |t, b| {
        let y = tensor::bmm(t, &batch_a, b)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("linear/input", &x34, |t, x| {
        let y = tensor::linear(t, x, &w45, &bias5)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("linear/weight", &w45, |t, w| {
        let y = tensor::linear(t, &x34, w, &bias5)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("linear/bias", &bias5, |t, b| {
        let y = tensor::linear(t, &x34, &w45, b)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("add", &x34, |t, x| {
        let y = tensor::add(t, x, &other34)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("mul", &x34, |t, x| {
        let y = tensor::mul(t, x, &other34)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("scale", &x34, |t, x| {
        let y = tensor::scale(t, x, -1.7);
        sq_sum(t, &y)
    }, out)?;
    check_leaf("gelu", &x34, |t, x| {
        let y = tensor::gelu(t, x);
        sq_sum(t, &y)
    }, out)?;
    check_leaf("softmax_lastdim", &x34, |t, x| {
        let y = tensor::softmax_lastdim(t, x)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("layer_norm/input", &x34, |t, x| {
        let y = tensor::layer_norm(t, x, &gamma, &beta, 1e-5)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("layer_norm/gamma", &gamma, |t, g| {
        let y = tensor::layer_norm(t, &x34, g, &beta, 1e-5)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("layer_norm/beta", &beta, |t, b| {
        let y = tensor::layer_norm(t, &x34, &gamma, b, 1e-5)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("concat_tokens", &x34, |t, x| {
        let y = tensor::concat_tokens(t, &[x.clone(), other34.clone()])?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("slice_rows", &x34, |t, x| {
        let y = tensor::slice_rows(t, x, 1, 2)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("mean_pool_tokens", &x34, |t, x| {
        let y = tensor::mean_pool_tokens(t, x)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("transpose_last2", &x34, |t, x| {
        let y = tensor::transpose_last2(t, x)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("reshape", &x34, |t, x| {
        let y = tensor::reshape(t, x, &[4, 3])?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("split_merge_heads", &x34, |t, x| {
        let split = tensor::split_heads(t, x, 2)?;
        let merged = tensor::merge_heads(t, &split)?;
        let y = tensor::mul(t, &merged, &other34)?;
        Ok(tensor::sum_all(t, &y))
    }, out)?;
    check_leaf("im2col", &img, |t, x| {
        let y = tensor::im2col(t, x, 3, 2, 1)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("avg_pool_chw", &img, |t, x| {
        let y = tensor::avg_pool_chw(t, x, (2, 2))?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("chw_tokens_roundtrip", &img, |t, x| {
        let tok = tensor::chw_to_tokens(t, x)?;
        let back = tensor::tokens_to_chw(t, &tok, (4, 4))?;
        let y = tensor::mul(t, &back, &img)?;
        Ok(tensor::sum_all(t, &y))
    }, out)?;
    check_leaf("cross_entropy", &logits, |t, l| {
        tensor::cross_entropy(t, l, &labels)
    }, out)?;
    check_leaf("drop_path_train", &x34, |t, x| {
        // Fixed seed: the drop decision is deterministic across FD evals.
        let mut r = Rng::new(3);
        let y = crate::blocks::drop_path(t, x, 0.4, Mode::Train, &mut r)?;
        sq_sum(t, &y)
    }, out)?;
    Ok(())
}

/// All parameter leaves of a block, detached; `pick` re-attaches one.
fn detached_block(p: &BlockParams) -> BlockParams {
    BlockParams {
        attn: AttentionParams {
            w_q: p.attn.w_q.with_requires_grad(false),
            w_k: p.attn.w_k.with_requires_grad(false),
            w_v: p.attn.w_v.with_requires_grad(false),
            w_o: p.attn.w_o.with_requires_grad(false),
            bias_table: p.attn.bias_table.as_ref().map(|b| b.with_requires_grad(false)),
            heads: p.attn.heads,
            dim: p.attn.dim,
        },
        mlp: MlpParams {
            w1: p.mlp.w1.with_requires_grad(false),
            b1: p.mlp.b1.with_requires_grad(false),
            w2: p.mlp.w2.with_requires_grad(false),
            b2: p.mlp.b2.with_requires_grad(false),
        },
        norm: NormParams {
            gamma: p.norm.gamma.with_requires_grad(false),
            beta: p.norm.beta.with_requires_grad(false),
        },
        drop_path_rate: p.drop_path_rate,
    }
}

type BlockLeafPick = fn(&mut BlockParams) -> &mut Tensor;

fn block_leaf_picks(windowed: bool) -> Vec<(&'static str, BlockLeafPick)> {
    let mut picks: Vec<(&'static str, BlockLeafPick)> = vec![
        ("w_q", |p| &mut p.attn.w_q),
        ("w_k", |p| &mut p.attn.w_k),
        ("w_v", |p| &mut p.attn.w_v),
        ("w_o", |p| &mut p.attn.w_o),
        ("mlp_w1", |p| &mut p.mlp.w1),
        ("mlp_b1", |p| &mut p.mlp.b1),
        ("mlp_w2", |p| &mut p.mlp.w2),
        ("mlp_b2", |p| &mut p.mlp.b2),
        ("gamma", |p| &mut p.norm.gamma),
        ("beta", |p| &mut p.norm.beta),
    ];
    if windowed {
        picks.push(("bias_table", |p| p.attn.bias_table.as_mut().unwrap()));
    }
    picks
}

fn block_checks(out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::new(0xb10c);
    let (n, d, m, heads) = (8usize, 8usize, 4usize, 2usize);
    let x = Tensor::rand_uniform(&[n, d], -1.0, 1.0, &mut rng);
    let lm_map = Tensor::rand_uniform(&[d, 4, 4], -1.0, 1.0, &mut rng);
    let lm_tokens = Tensor::rand_uniform(&[n, d], -1.0, 1.0, &mut rng);
    let layout = WindowLayout::new(n, m).unwrap();

    // transformer_block: input plus every parameter leaf.
    let p_tb = BlockParams::init(d, heads, None, 2, 0.0, &mut rng)?;
    check_leaf("transformer_block/input", &x, |t, xt| {
        let mut r = Rng::new(1);
        let y = transformer_block(t, xt, &p_tb, Mode::Eval, &mut r, None)?;
        sq_sum(t, &y)
    }, out)?;
    for (leaf, pick) in block_leaf_picks(false) {
        let mut probe = detached_block(&p_tb);
        let x0 = pick(&mut probe).clone();
        check_leaf(&format!("transformer_block/{leaf}"), &x0, |t, xt| {
            let mut pb = detached_block(&p_tb);
            *pick(&mut pb) = xt.clone();
            let mut r = Rng::new(1);
            let y = transformer_block(t, &x, &pb, Mode::Eval, &mut r, None)?;
            sq_sum(t, &y)
        }, out)?;
    }

    // cross_fusion_v2: both inputs plus every parameter leaf.
    let p_cf2 = BlockParams::init(d, heads, Some(m), 2, 0.0, &mut rng)?;
    check_leaf("cross_fusion_v2/x_img", &x, |t, xt| {
        let mut r = Rng::new(1);
        let y = cross_fusion_v2(t, xt, &lm_map, &p_cf2, layout, Mode::Eval, &mut r, None)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("cross_fusion_v2/x_lm", &lm_map, |t, lm| {
        let mut r = Rng::new(1);
        let y = cross_fusion_v2(t, &x, lm, &p_cf2, layout, Mode::Eval, &mut r, None)?;
        sq_sum(t, &y)
    }, out)?;
    for (leaf, pick) in block_leaf_picks(true) {
        let mut probe = detached_block(&p_cf2);
        let x0 = pick(&mut probe).clone();
        check_leaf(&format!("cross_fusion_v2/{leaf}"), &x0, |t, xt| {
            let mut pb = detached_block(&p_cf2);
            *pick(&mut pb) = xt.clone();
            let mut r = Rng::new(1);
            let y = cross_fusion_v2(t, &x, &lm_map, &pb, layout, Mode::Eval, &mut r, None)?;
            sq_sum(t, &y)
        }, out)?;
    }

    // cross_fusion_v1: both stream inputs plus each branch's leaves.
    let p_img = BlockParams::init(d, heads, None, 2, 0.0, &mut rng)?;
    let p_lm = BlockParams::init(d, heads, None, 2, 0.0, &mut rng)?;
    let run_v1 = |t: &mut Tape,
                  xi: &Tensor,
                  xl: &Tensor,
                  pi: &BlockParams,
                  pl: &BlockParams|
     -> Result<Tensor> {
        let mut r = Rng::new(1);
        let (a, b) = cross_fusion_v1(
            t,
            xi,
            xl,
            pi,
            pl,
            BranchToggles::default(),
            Mode::Eval,
            &mut r,
            None,
        )?;
        let sum = tensor::add(t, &a, &b)?;
        sq_sum(t, &sum)
    };
    check_leaf("cross_fusion_v1/x_img", &x, |t, xt| {
        run_v1(t, xt, &lm_tokens, &p_img, &p_lm)
    }, out)?;
    check_leaf("cross_fusion_v1/x_lm", &lm_tokens, |t, xt| {
        run_v1(t, &x, xt, &p_img, &p_lm)
    }, out)?;
    for (leaf, pick) in block_leaf_picks(false) {
        let mut probe = detached_block(&p_img);
        let x0 = pick(&mut probe).clone();
        check_leaf(&format!("cross_fusion_v1/img.{leaf}"), &x0, |t, xt| {
            let mut pb = detached_block(&p_img);
            *pick(&mut pb) = xt.clone();
            run_v1(t, &x, &lm_tokens, &pb, &detached_block(&p_lm))
        }, out)?;
        let mut probe = detached_block(&p_lm);
        let x0 = pick(&mut probe).clone();
        check_leaf(&format!("cross_fusion_v1/lm.{leaf}"), &x0, |t, xt| {
            let mut pb = detached_block(&p_lm);
            *pick(&mut pb) = xt.clone();
            run_v1(t, &x, &lm_tokens, &detached_block(&p_img), &pb)
        }, out)?;
    }

    // Raw attention kernels, end to end.
    let p_w = AttentionParams::init(d, heads, Some(m), &mut rng)?;
    let z_lm = Tensor::rand_uniform(&[m, d], -1.0, 1.0, &mut rng);
    check_leaf("w_mcsa/x_img", &x, |t, xt| {
        let y = attention::w_mcsa(t, xt, &z_lm, &p_w, layout, None)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("w_mcsa/z_lm", &z_lm, |t, zt| {
        let y = attention::w_mcsa(t, &x, zt, &p_w, layout, None)?;
        sq_sum(t, &y)
    }, out)?;
    let p_v = AttentionParams::init(d, heads, None, &mut rng)?;
    check_leaf("mcsa/q_src", &lm_tokens, |t, q| {
        let y = attention::mcsa(t, q, &x, &p_v, None)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("mcsa/kv_src", &x, |t, kv| {
        let y = attention::mcsa(t, &lm_tokens, kv, &p_v, None)?;
        sq_sum(t, &y)
    }, out)?;
    check_leaf("msa/input", &x, |t, xt| {
        let y = attention::msa(t, xt, &p_v, None)?;
        sq_sum(t, &y)
    }, out)?;
    Ok(())
}

/// Sampled full-model check at the desk configuration: backward once, then
/// finite differences at a few seeded elements of every trainable tensor.
fn model_checks(out: &mut Vec<CheckResult>) -> Result<()> {
    let mut cfg = ModelConfig::desk();
    cfg.drop_path_max = 0.0; // deterministic in eval mode anyway
    model_sampled_check("model/desk", cfg, 3, out)
}

pub fn model_sampled_check(
    name: &str,
    cfg: ModelConfig,
    samples_per_tensor: usize,
    out: &mut Vec<CheckResult>,
) -> Result<()> {
    let mut rng = Rng::new(0xdec0);
    let model = Model::init(cfg, &mut rng)?;
    let ds = data::synth_dataset(17, 1, model.cfg.num_classes, model.cfg.input_size.0)?;
    let image = ds.samples[3].image.clone();
    let label = ds.samples[3].label;

    let loss_of = |model: &Model| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let mut r = Rng::new(0);
        let logits = model.forward(&mut tape, &image, Mode::Eval, &mut r, None)?;
        let row = tensor::reshape(&mut tape, &logits, &[1, model.cfg.num_classes])?;
        tensor::cross_entropy(&mut tape, &row, &[label])?.scalar()
    };

    // Analytic gradients for every parameter in one backward pass.
    let mut tape = Tape::new();
    let mut r = Rng::new(0);
    let logits = model.forward(&mut tape, &image, Mode::Eval, &mut r, None)?;
    let row = tensor::reshape(&mut tape, &logits, &[1, model.cfg.num_classes])?;
    let loss = tensor::cross_entropy(&mut tape, &row, &[label])?;
    tape.backward(&loss)?;

    let mut grads: Vec<(String, Tensor, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |path, t| {
        if t.requires_grad() {
            if let Some(g) = t.grad() {
                grads.push((path.to_string(), t.clone(), g));
            }
        }
    });
    if grads.is_empty() {
        return Err(Error::contract("gradcheck", "model backward produced no gradients"));
    }

    let mut pick_rng = Rng::new(0x5a5a);
    let mut worst = 0.0f64;
    for (path, tensor_handle, analytic) in &grads {
        let k = samples_per_tensor.min(tensor_handle.numel());
        let mut indices: Vec<usize> = (0..k)
            .map(|_| pick_rng.below(tensor_handle.numel()))
            .collect();
        indices.sort_unstable();
        indices.dedup();

        let path_owned = path.clone();
        let numeric = finite_diff_grad_at(
            |xt| {
                let mut probe = Model {
                    cfg: model.cfg.clone(),
                    params: model.params.clone(),
                };
                let mut replaced = false;
                probe.visit_params_mut(&mut |p, t| {
                    if p == path_owned {
                        *t = xt.with_requires_grad(false);
                        replaced = true;
                    }
                });
                debug_assert!(replaced);
                loss_of(&probe)
            },
            tensor_handle,
            &indices,
            STEP,
        )?;
        let picked: Vec<f64> = indices.iter().map(|&i| analytic[i]).collect();
        worst = worst.max(max_rel_err(&picked, &numeric));
    }
    out.push(CheckResult {
        name: name.to_string(),
        max_rel_err: worst,
    });
    Ok(())
}

/// Run the selected scope; results are ordered ops, blocks, model.
pub fn run(scope: Scope) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Ops | Scope::All) {
        op_checks(&mut out)?;
    }
    if matches!(scope, Scope::Blocks | Scope::All) {
        block_checks(&mut out)?;
    }
    if matches!(scope, Scope::Model | Scope::All) {
        model_checks(&mut out)?;
    }
    Ok(out)
}
