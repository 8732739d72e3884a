//! Accuracy and F1 scores for single- and multi-label predictions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::objectives::{LabelMode, LabelTarget};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Share of samples whose predicted label set equals the target exactly.
    pub accuracy: f64,
    pub f1_macro: f64,
    pub f1_micro: f64,
    pub per_class_f1: Vec<f64>,
    /// Positive targets per class.
    pub support: Vec<usize>,
    /// The protocol the predictions were made under, when known.
    pub protocol: Option<String>,
}

/// Turns logits into a predicted label: argmax for single-label, every
/// slot with a non-negative logit (sigmoid ≥ 0.5) for multi-label.
pub fn decide(logits: &Tensor2D, mode: LabelMode) -> Result<LabelTarget> {
    if logits.rows() != 1 || logits.cols() == 0 {
        return Err(invalid("decide", "logits must be a nonempty row"));
    }
    Ok(match mode {
        LabelMode::Single => LabelTarget::Single(logits.argmax_rows()[0]),
        LabelMode::Multi => LabelTarget::Multi(logits.data().iter().map(|&z| z >= 0.0).collect()),
    })
}

/// `2·tp / (2·tp + fp + fn)` with `0/0 → 0`.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn compute_metrics(preds: &[LabelTarget], targets: &[LabelTarget], n_classes: usize) -> Result<Metrics> {
    if preds.is_empty() {
        return Err(Error::Empty { op: "compute_metrics" });
    }
    if preds.len() != targets.len() {
        return Err(invalid(
            "compute_metrics",
            format!("{} predictions for {} targets", preds.len(), targets.len()),
        ));
    }
    let mode = targets[0].mode();
    for (p, t) in preds.iter().zip(targets) {
        if p.mode() != mode || t.mode() != mode {
            return Err(invalid("compute_metrics", "label modes differ"));
        }
        p.validate(n_classes)?;
        t.validate(n_classes)?;
    }
    let (mut tp, mut fp, mut fn_) = (vec![0usize; n_classes], vec![0usize; n_classes], vec![0usize; n_classes]);
    let mut support = vec![0usize; n_classes];
    let mut exact = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        if p == t {
            exact += 1;
        }
        for k in 0..n_classes {
            match (p.has(k), t.has(k)) {
                (true, true) => tp[k] += 1,
                (true, false) => fp[k] += 1,
                (false, true) => fn_[k] += 1,
                (false, false) => {}
            }
            if t.has(k) {
                support[k] += 1;
            }
        }
    }
    let per_class_f1: Vec<f64> = (0..n_classes).map(|k| f1_from_counts(tp[k], fp[k], fn_[k])).collect();
    let f1_macro = per_class_f1.iter().sum::<f64>() / n_classes as f64;
    let sum = |v: &[usize]| v.iter().sum::<usize>();
    let f1_micro = f1_from_counts(sum(&tp), sum(&fp), sum(&fn_));
    Ok(Metrics {
        accuracy: exact as f64 / preds.len() as f64,
        f1_macro,
        f1_micro,
        per_class_f1,
        support,
        protocol: None,
    })
}
