//! Class-wise evaluation: confusion matrix, per-class accuracy (recall),
//! unweighted mean accuracy, and overall accuracy.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const CLASS_NAMES_7: [&str; 7] =
    ["neutral", "happy", "sad", "surprise", "fear", "disgust", "anger"];
pub const CLASS_NAMES_8: [&str; 8] = [
    "neutral", "happy", "sad", "surprise", "fear", "disgust", "anger", "contempt",
];

pub fn class_names(classes: usize) -> Result<Vec<String>> {
    match classes {
        7 => Ok(CLASS_NAMES_7.iter().map(|s| s.to_string()).collect()),
        8 => Ok(CLASS_NAMES_8.iter().map(|s| s.to_string()).collect()),
        other => Err(Error::config(format!("no class names for {other} classes"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub accuracy_pct: f64,
}

/// Evaluation summary. Confusion rows are true classes, columns predicted;
/// row sums equal the per-class sample counts; `overall_acc_pct` is
/// trace/total and `mean_acc_pct` the unweighted mean of per-class
/// accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_acc: Vec<ClassAccuracy>,
    pub mean_acc_pct: f64,
    pub overall_acc_pct: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Rebuild the derived numbers from a raw confusion matrix.
    pub fn from_confusion(confusion: Vec<Vec<u64>>, names: &[String]) -> EvalReport {
        let classes = confusion.len();
        let mut per_class_acc = Vec::with_capacity(classes);
        let mut trace = 0u64;
        let mut total = 0u64;
        for (c, row) in confusion.iter().enumerate() {
            let row_sum: u64 = row.iter().sum();
            let hit = row[c];
            trace += hit;
            total += row_sum;
            let acc = if row_sum == 0 {
                0.0
            } else {
                100.0 * hit as f64 / row_sum as f64
            };
            per_class_acc.push(ClassAccuracy {
                class: names[c].clone(),
                accuracy_pct: acc,
            });
        }
        let mean_acc_pct =
            per_class_acc.iter().map(|c| c.accuracy_pct).sum::<f64>() / classes as f64;
        let overall_acc_pct = if total == 0 {
            0.0
        } else {
            100.0 * trace as f64 / total as f64
        };
        EvalReport {
            per_class_acc,
            mean_acc_pct,
            overall_acc_pct,
            confusion,
        }
    }
}

/// Argmax with ties broken toward the lowest class index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn predictions(model: &Model, data: &[Sample]) -> Result<Vec<(usize, usize)>> {
    #[cfg(feature = "parallel")]
    {
        data.par_iter()
            .map(|s| Ok((s.label, predict(&model.eval_logits(&s.image)?))))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.iter()
            .map(|s| Ok((s.label, predict(&model.eval_logits(&s.image)?))))
            .collect()
    }
}

/// Eval-mode pass over a dataset. Deterministic and independent of sample
/// order (each sample is scored in isolation).
pub fn evaluate(model: &Model, data: &[Sample]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::contract("evaluate", "empty dataset"));
    }
    let classes = model.cfg.num_classes;
    let names = class_names(classes)?;
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (label, pred) in predictions(model, data)? {
        if label >= classes {
            return Err(Error::index(
                "evaluate",
                format!("label {label} out of 0..{classes}"),
            ));
        }
        confusion[label][pred] += 1;
    }
    Ok(EvalReport::from_confusion(confusion, &names))
}

/// Mean eval-mode cross-entropy over a dataset.
pub fn mean_loss(model: &Model, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("mean_loss", "empty dataset"));
    }
    let losses: Result<Vec<f64>> = {
        #[cfg(feature = "parallel")]
        {
            data.par_iter().map(|s| sample_loss(model, s)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            data.iter().map(|s| sample_loss(model, s)).collect()
        }
    };
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn sample_loss(model: &Model, s: &Sample) -> Result<f64> {
    Ok(ce_from_logits(&model.eval_logits(&s.image)?, s.label))
}

/// Stable -log softmax(logits)[label] straight from logit values.
pub fn ce_from_logits(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - logits[label]
}

/// Loss and accuracy (percent) in one eval-mode pass over the dataset.
pub fn eval_metrics(model: &Model, data: &[Sample]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::contract("eval_metrics", "empty dataset"));
    }
    let per_sample: Result<Vec<(f64, bool)>> = {
        let score = |s: &Sample| -> Result<(f64, bool)> {
            let logits = model.eval_logits(&s.image)?;
            Ok((
                ce_from_logits(&logits, s.label),
                predict(&logits) == s.label,
            ))
        };
        #[cfg(feature = "parallel")]
        {
            data.par_iter().map(score).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            data.iter().map(score).collect()
        }
    };
    let per_sample = per_sample?;
    let loss = per_sample.iter().map(|(l, _)| l).sum::<f64>() / per_sample.len() as f64;
    let acc = 100.0 * per_sample.iter().filter(|(_, hit)| *hit).count() as f64
        / per_sample.len() as f64;
    Ok((loss, acc))
}
