//! Task loss, proxy-alignment loss and their weighted total.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::fusion::PresenceMask;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelTarget {
    Single(usize),
    Multi(Vec<bool>),
}

impl LabelTarget {
    pub fn mode(&self) -> LabelMode {
        match self {
            LabelTarget::Single(_) => LabelMode::Single,
            LabelTarget::Multi(_) => LabelMode::Multi,
        }
    }

    /// Whether class `k` is a positive label.
    pub fn has(&self, k: usize) -> bool {
        match self {
            LabelTarget::Single(c) => *c == k,
            LabelTarget::Multi(v) => v.get(k).copied().unwrap_or(false),
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self {
            LabelTarget::Single(c) if *c >= classes => Err(invalid(
                "label",
                format!("class {c} out of range for {classes} classes"),
            )),
            LabelTarget::Multi(v) if v.len() != classes => Err(invalid(
                "label",
                format!("{} label slots for {classes} classes", v.len()),
            )),
            _ => Ok(()),
        }
    }
}

/// Loss values of one batch or epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub align: f64,
    pub total: f64,
    pub lambda: f64,
    pub n_complete_in_batch: usize,
}

/// Mean softmax cross-entropy (single) or mean sigmoid BCE over every
/// label slot of the batch (multi).
pub fn task_loss(tape: &mut Tape, logits: &[Var], targets: &[LabelTarget]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::Empty { op: "task_loss" });
    }
    if logits.len() != targets.len() {
        return Err(shape_err(
            "task_loss",
            format!("{} logits for {} targets", logits.len(), targets.len()),
        ));
    }
    let mode = targets[0].mode();
    let mut terms = Vec::with_capacity(logits.len());
    for (&z, y) in logits.iter().zip(targets) {
        if y.mode() != mode {
            return Err(invalid("task_loss", "mixed label modes in one batch"));
        }
        let term = match y {
            LabelTarget::Single(c) => tape.cross_entropy(z, *c)?,
            LabelTarget::Multi(v) => {
                let ys: Vec<f64> = v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                tape.bce_with_logits(z, &ys)?
            }
        };
        terms.push(term);
    }
    let stacked = tape.concat_rows(&terms)?;
    tape.mean(stacked)
}

/// Mean over the `d` coordinates of `(a − b)²`.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (va, vb) = (tape.value(a), tape.value(b));
    if va.shape() != vb.shape() {
        return Err(shape_err("mse", format!("{:?} vs {:?}", va.shape(), vb.shape())));
    }
    tape.mse(a, b)
}

/// Output tokens of one sample as seen by the alignment loss. Tokens of a
/// modality that was not forwarded are `None`.
#[derive(Debug, Clone, Copy)]
pub struct AlignInput {
    pub cmpt1: Option<Var>,
    pub cls1: Option<Var>,
    pub cmpt2: Option<Var>,
    pub cls2: Option<Var>,
    /// Physical availability, not the simulated dropout mask.
    pub mask: PresenceMask,
}

/// `Σ_complete [mse(cmpt1, cls2) + mse(cmpt2, cls1)] / n_complete`.
///
/// Only samples with both modalities present contribute. With `symmetric`
/// false the class tokens are detached and act as regression targets.
/// Returns a zero scalar and a count of 0 when no sample is complete.
pub fn alignment_loss(tape: &mut Tape, batch: &[AlignInput], symmetric: bool) -> Result<(Var, usize)> {
    let mut terms = Vec::new();
    for s in batch.iter().filter(|s| s.mask.is_complete()) {
        let (Some(cmpt1), Some(cls1), Some(cmpt2), Some(cls2)) = (s.cmpt1, s.cls1, s.cmpt2, s.cls2) else {
            return Err(invalid("alignment_loss", "complete sample without all four tokens"));
        };
        let (t1, t2) = if symmetric {
            (cls1, cls2)
        } else {
            (tape.detach(cls1)?, tape.detach(cls2)?)
        };
        let a = mse(tape, cmpt1, t2)?;
        let b = mse(tape, cmpt2, t1)?;
        terms.push(tape.add(a, b)?);
    }
    if terms.is_empty() {
        return Ok((tape.constant(Tensor2D::scalar(0.0))?, 0));
    }
    let n = terms.len();
    let stacked = tape.concat_rows(&terms)?;
    Ok((tape.mean(stacked)?, n))
}

/// `task + lambda·align` as a tape node.
pub fn total_loss(tape: &mut Tape, task: Var, align: Var, lambda: f64) -> Result<Var> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(invalid("total_loss", "lambda must be non-negative"));
    }
    let weighted = tape.scale(align, lambda)?;
    tape.add(task, weighted)
}

/// The value-level breakdown of [`total_loss`].
pub fn breakdown(task: f64, align: f64, lambda: f64, n_complete: usize) -> Result<LossBreakdown> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(invalid("total_loss", "lambda must be non-negative"));
    }
    Ok(LossBreakdown {
        task,
        align,
        total: task + lambda * align,
        lambda,
        n_complete_in_batch: n_complete,
    })
}
