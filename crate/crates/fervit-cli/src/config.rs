//! Run configuration: a single strict JSON file with explicit defaults.
//!
//! Parsing is strict (unknown keys are rejected everywhere). Fields omitted
//! from the file take their defaults; `config dump` prints the fully
//! resolved form, which re-parses to itself byte for byte.

use fervit::data::AugmentConfig;
use fervit::error::{Error, Result};
use fervit::model::{Ablations, ModelConfig, Variant};
use fervit::train::{Preset, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
    pub attnmap: AttnmapConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub out_dir: String,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// "mcsa", "w_mcsa", or "both".
    pub kernel: String,
    pub sweep: Vec<usize>,
    pub dim: usize,
    pub window_tokens: usize,
    pub heads: usize,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    /// "ops", "blocks", "model", or "all".
    pub scope: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnmapConfig {
    /// PGM (P5) or PPM (P6) input image; dimensions must match the model's
    /// configured input size.
    pub image: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::preset(Preset::Desk),
            paths: Paths {
                out_dir: "out".to_string(),
                checkpoint: None,
            },
            bench: BenchConfig {
                kernel: "both".to_string(),
                sweep: vec![256, 512, 1024, 2048, 4096],
                dim: 64,
                window_tokens: 16,
                heads: 4,
                reps: 3,
            },
            gradcheck: GradcheckConfig {
                scope: "all".to_string(),
            },
            attnmap: AttnmapConfig { image: None },
        }
    }
}

// ── Raw (partial) forms: every field optional, defaults filled on resolve ──

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    model: Option<RawModel>,
    train: Option<RawTrain>,
    paths: Option<RawPaths>,
    bench: Option<RawBench>,
    gradcheck: Option<RawGradcheck>,
    attnmap: Option<AttnmapConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    input_size: Option<(usize, usize)>,
    num_scales: Option<usize>,
    scale_dims: Option<Vec<usize>>,
    d_model: Option<usize>,
    heads: Option<usize>,
    window_tokens: Option<Vec<usize>>,
    vit_depth: Option<usize>,
    num_classes: Option<usize>,
    mlp_ratio: Option<usize>,
    variant: Option<Variant>,
    ablations: Option<Ablations>,
    drop_path_max: Option<f64>,
    landmark_frozen: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    preset: Option<Preset>,
    lr0: Option<f64>,
    weight_decay: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    lr_gamma: Option<f64>,
    aug: Option<AugmentConfig>,
    seed: Option<u64>,
    n_per_class: Option<usize>,
    val_fraction: Option<f64>,
    stop_at_train_acc_pct: Option<Option<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPaths {
    out_dir: Option<String>,
    checkpoint: Option<Option<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBench {
    kernel: Option<String>,
    sweep: Option<Vec<usize>>,
    dim: Option<usize>,
    window_tokens: Option<usize>,
    heads: Option<usize>,
    reps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGradcheck {
    scope: Option<String>,
}

impl RunConfig {
    /// Parse a config file: explicit fields override the defaults (the
    /// train preset is applied first, then its field overrides).
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let raw: RawRunConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("config parse: {e}")))?;
        let defaults = RunConfig::default();

        let model = {
            let base = defaults.model;
            let m = raw.model.unwrap_or_default();
            ModelConfig {
                input_size: m.input_size.unwrap_or(base.input_size),
                num_scales: m.num_scales.unwrap_or(base.num_scales),
                scale_dims: m.scale_dims.unwrap_or(base.scale_dims),
                d_model: m.d_model.unwrap_or(base.d_model),
                heads: m.heads.unwrap_or(base.heads),
                window_tokens: m.window_tokens.unwrap_or(base.window_tokens),
                vit_depth: m.vit_depth.unwrap_or(base.vit_depth),
                num_classes: m.num_classes.unwrap_or(base.num_classes),
                mlp_ratio: m.mlp_ratio.unwrap_or(base.mlp_ratio),
                variant: m.variant.unwrap_or(base.variant),
                ablations: m.ablations.unwrap_or(base.ablations),
                drop_path_max: m.drop_path_max.unwrap_or(base.drop_path_max),
                landmark_frozen: m.landmark_frozen.unwrap_or(base.landmark_frozen),
            }
        };

        let train = {
            let t = raw.train.unwrap_or_default();
            let base = TrainConfig::preset(t.preset.unwrap_or(Preset::Desk));
            TrainConfig {
                preset: base.preset,
                lr0: t.lr0.unwrap_or(base.lr0),
                weight_decay: t.weight_decay.unwrap_or(base.weight_decay),
                batch_size: t.batch_size.unwrap_or(base.batch_size),
                epochs: t.epochs.unwrap_or(base.epochs),
                lr_gamma: t.lr_gamma.unwrap_or(base.lr_gamma),
                aug: t.aug.unwrap_or(base.aug),
                seed: t.seed.unwrap_or(base.seed),
                n_per_class: t.n_per_class.unwrap_or(base.n_per_class),
                val_fraction: t.val_fraction.unwrap_or(base.val_fraction),
                stop_at_train_acc_pct: t
                    .stop_at_train_acc_pct
                    .unwrap_or(base.stop_at_train_acc_pct),
            }
        };

        let paths = {
            let p = raw.paths.unwrap_or_default();
            Paths {
                out_dir: p.out_dir.unwrap_or_else(|| defaults.paths.out_dir.clone()),
                checkpoint: p.checkpoint.unwrap_or(None),
            }
        };

        let bench = {
            let b = raw.bench.unwrap_or_default();
            let base = defaults.bench;
            BenchConfig {
                kernel: b.kernel.unwrap_or(base.kernel),
                sweep: b.sweep.unwrap_or(base.sweep),
                dim: b.dim.unwrap_or(base.dim),
                window_tokens: b.window_tokens.unwrap_or(base.window_tokens),
                heads: b.heads.unwrap_or(base.heads),
                reps: b.reps.unwrap_or(base.reps),
            }
        };

        let gradcheck = GradcheckConfig {
            scope: raw
                .gradcheck
                .unwrap_or_default()
                .scope
                .unwrap_or_else(|| defaults.gradcheck.scope.clone()),
        };

        let attnmap = raw.attnmap.unwrap_or(defaults.attnmap);

        let cfg = RunConfig {
            model,
            train,
            paths,
            bench,
            gradcheck,
            attnmap,
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Canonical dump: pretty JSON with every field explicit, trailing
    /// newline. `from_json(dump(c))` re-dumps to identical bytes.
    pub fn dump(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
