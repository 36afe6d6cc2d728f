//! Command implementations. Each writes its artifacts under the out
//! directory and logs progress to stderr (never stdout, which stays
//! machine-readable).

use crate::config::RunConfig;
use crate::{debug, info};
use fervit::blocks::Mode;
use fervit::checkpoint;
use fervit::complexity::{self, KernelKind};
use fervit::data::synth_dataset;
use fervit::error::{Error, Result};
use fervit::eval::evaluate;
use fervit::gradcheck;
use fervit::model::{Model, ForwardTrace};
use fervit::pgm;
use fervit::rng::Rng;
use fervit::tensor::Tape;
use fervit::train::{split_dataset, train, TrainConfig};
use std::path::Path;

/// Model-init stream is derived from the run seed so reruns are identical.
fn model_rng(seed: u64) -> Rng {
    Rng::new(seed ^ 0x006d_6f64_656c_5f69)
}

fn effective_train_cfg(cfg: &RunConfig, seed_override: Option<u64>) -> TrainConfig {
    let mut t = cfg.train.clone();
    if let Some(seed) = seed_override {
        t.seed = seed;
    }
    t
}

fn dataset_for(cfg: &RunConfig, train_cfg: &TrainConfig) -> Result<fervit::data::Dataset> {
    let (h, w) = cfg.model.input_size;
    if h != w {
        return Err(Error::config(format!(
            "synthetic dataset needs square inputs, configured {h}x{w}"
        )));
    }
    synth_dataset(
        train_cfg.seed,
        train_cfg.n_per_class,
        cfg.model.num_classes,
        h,
    )
}

fn ensure_out_dir(out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, seed_override: Option<u64>) -> Result<()> {
    let train_cfg = effective_train_cfg(cfg, seed_override);
    let dataset = dataset_for(cfg, &train_cfg)?;
    let (train_set, val_set) = split_dataset(&dataset, train_cfg.val_fraction, train_cfg.seed);
    info(format!(
        "training on {} samples ({} held out), {} epochs",
        train_set.len(),
        val_set.len(),
        train_cfg.epochs
    ));

    let mut model = Model::init(cfg.model.clone(), &mut model_rng(train_cfg.seed))?;
    let outcome = train(&mut model, &train_set, &val_set, &train_cfg)?;

    ensure_out_dir(out_dir)?;
    let csv_path = out_dir.join("train_log.csv");
    std::fs::write(&csv_path, outcome.to_csv())?;
    let ckpt_path = out_dir.join("model.ckpt");
    checkpoint::save(&model, &ckpt_path)?;

    if let Some(last) = outcome.epoch_logs.last() {
        info(format!(
            "epoch {}: train_acc {:.2}% val_acc {:.2}%{}",
            last.epoch,
            last.train_acc_pct,
            last.val_acc_pct,
            if outcome.stopped_early {
                " (stopped early)"
            } else {
                ""
            }
        ));
    }
    info(format!(
        "wrote {} and {}",
        csv_path.display(),
        ckpt_path.display()
    ));
    Ok(())
}

pub fn cmd_eval(
    cfg: &RunConfig,
    out_dir: &Path,
    checkpoint_flag: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<()> {
    let train_cfg = effective_train_cfg(cfg, seed_override);
    let ckpt_path = checkpoint_path(cfg, checkpoint_flag)?;

    let dataset = dataset_for(cfg, &train_cfg)?;
    let (train_set, val_set) = split_dataset(&dataset, train_cfg.val_fraction, train_cfg.seed);
    let eval_set = if val_set.is_empty() { train_set } else { val_set };

    let mut model = Model::init(cfg.model.clone(), &mut model_rng(train_cfg.seed))?;
    checkpoint::load_into(&mut model, &ckpt_path)?;
    let report = evaluate(&model, &eval_set)?;

    ensure_out_dir(out_dir)?;
    let path = out_dir.join("eval_report.json");
    std::fs::write(&path, report.to_json())?;
    info(format!(
        "overall {:.2}% mean {:.2}% over {} samples; wrote {}",
        report.overall_acc_pct,
        report.mean_acc_pct,
        eval_set.len(),
        path.display()
    ));
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, flag: Option<&Path>) -> Result<std::path::PathBuf> {
    match flag {
        Some(p) => Ok(p.to_path_buf()),
        None => match &cfg.paths.checkpoint {
            Some(p) => Ok(std::path::PathBuf::from(p)),
            None => Err(Error::config(
                "no checkpoint given (--checkpoint flag or paths.checkpoint)",
            )),
        },
    }
}

pub fn cmd_count(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let report = complexity::model_cost(&cfg.model)?;
    ensure_out_dir(out_dir)?;
    let path = out_dir.join("cost_report.json");
    std::fs::write(&path, report.to_json())?;
    info(format!(
        "params {} macs {} (2x-mac flops {}); wrote {}",
        report.totals.params,
        report.totals.macs,
        report.totals.flops_2x_macs,
        path.display()
    ));
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let kernels: Vec<KernelKind> = match cfg.bench.kernel.as_str() {
        "both" => vec![KernelKind::Mcsa, KernelKind::WMcsa],
        one => vec![one.parse()?],
    };
    ensure_out_dir(out_dir)?;
    for kernel in kernels {
        let name = match kernel {
            KernelKind::Mcsa => "mcsa",
            KernelKind::WMcsa => "w_mcsa",
        };
        debug(format!("benchmarking {name} over {:?}", cfg.bench.sweep));
        let report = complexity::bench_scaling(
            kernel,
            &cfg.bench.sweep,
            cfg.bench.dim,
            cfg.bench.window_tokens,
            cfg.bench.heads,
            cfg.bench.reps,
            cfg.train.seed,
        )?;
        let path = out_dir.join(format!("bench_{name}.csv"));
        std::fs::write(&path, report.to_csv())?;
        info(format!(
            "{name}: fitted log-log slope {:.3}; wrote {}",
            report.slope,
            path.display()
        ));
    }
    Ok(())
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let scope: gradcheck::Scope = cfg.gradcheck.scope.parse()?;
    let results = gradcheck::run(scope)?;
    println!("{:<40} {:>14} {:>8}", "check", "max_rel_err", "status");
    let mut failures = 0;
    for r in &results {
        println!(
            "{:<40} {:>14.3e} {:>8}",
            r.name,
            r.max_rel_err,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failures += 1;
        }
    }
    if results.iter().any(|r| r.max_rel_err.is_nan()) {
        return Err(Error::numeric("gradcheck", "NaN relative error"));
    }
    if failures > 0 {
        return Err(Error::contract(
            "gradcheck",
            format!("{failures} of {} checks exceeded {}", results.len(), gradcheck::TOLERANCE),
        ));
    }
    info(format!("all {} checks passed", results.len()));
    Ok(())
}

pub fn cmd_attnmap(cfg: &RunConfig, out_dir: &Path, checkpoint_flag: Option<&Path>) -> Result<()> {
    let image_path = cfg
        .attnmap
        .image
        .as_ref()
        .ok_or_else(|| Error::config("attnmap.image is required for the attnmap command"))?;
    let ckpt_path = checkpoint_path(cfg, checkpoint_flag)?;

    let image = pgm::read_image(Path::new(image_path))?;
    let (h, w) = cfg.model.input_size;
    if image.shape() != [3, h, w] {
        return Err(Error::config(format!(
            "input image is {:?}, model expects [3, {h}, {w}]",
            image.shape()
        )));
    }

    let mut model = Model::init(cfg.model.clone(), &mut model_rng(cfg.train.seed))?;
    checkpoint::load_into(&mut model, &ckpt_path)?;

    let mut tape = Tape::no_grad();
    let mut trace = ForwardTrace::default();
    let mut rng = Rng::new(0);
    let logits = model.forward(&mut tape, &image, Mode::Eval, &mut rng, Some(&mut trace))?;
    if logits.has_nan() {
        return Err(Error::numeric("attnmap", "NaN logits"));
    }
    if trace.scales.is_empty() {
        return Err(Error::config(
            "this configuration has no cross-fusion attention to visualize",
        ));
    }

    ensure_out_dir(out_dir)?;
    for (i, scale) in trace.scales.iter().enumerate() {
        let mass = scale.token_mass();
        let bytes = pgm::normalize_to_bytes(&mass);
        let (gh, gw) = scale.grid;
        let path = out_dir.join(format!("attn_scale{i}.pgm"));
        pgm::write_pgm(&path, gw, gh, &bytes)?;
        info(format!("wrote {} ({gw}x{gh})", path.display()));
    }
    Ok(())
}
