//! Unimodal pretraining of the bases and the adaptation stage with modality
//! dropout.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{batches, Dataset, Sample};
use crate::encoder::{extract, EncoderConfig, InputShape, Modality, Slot};
use crate::error::{Error, Result};
use crate::fusion::{predict, ClassifierHead, PresenceMask};
use crate::model::{CmptModel, Pretrained};
use crate::objectives::{task_loss, LabelTarget};
use crate::optim::{poly_lr, AdamW, AdamWConfig, Schedule};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_factor: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub betas: (f64, f64),
    pub lambda: f64,
    /// Probabilities of keeping both, dropping m1 and dropping m2 on a
    /// complete training sample.
    pub dropout_probs: (f64, f64, f64),
    pub batch_size: usize,
    /// Lets the alignment loss push on the class tokens as well.
    pub symmetric_align: bool,
    /// Global gradient-norm bound; off when `None`.
    pub grad_clip: Option<f64>,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 30,
            warmup_epochs: 5,
            warmup_factor: 0.1,
            poly_power: 0.9,
            weight_decay: 0.02,
            adam_eps: 1e-8,
            betas: (0.9, 0.999),
            lambda: 0.2,
            dropout_probs: (0.5, 0.25, 0.25),
            batch_size: 8,
            symmetric_align: false,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        let (a, b, c) = self.dropout_probs;
        if [a, b, c].iter().any(|p| !(0.0..=1.0).contains(p)) || libm::fabs(a + b + c - 1.0) > 1e-9 {
            return fail("dropout_probs must be probabilities summing to 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be finite and non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return fail("warmup_epochs cannot exceed epochs");
        }
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(beta_ok(self.betas.0) && beta_ok(self.betas.1)) || self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return fail("invalid optimizer constants");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return fail("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr: self.lr,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            warmup_factor: self.warmup_factor,
            poly_power: self.poly_power,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Settings of the unimodal stage that produces the frozen bases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            epochs: 12,
            warmup_epochs: 1,
            batch_size: 16,
            weight_decay: 0.02,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.warmup_epochs > self.epochs {
            return Err(Error::Config("invalid pretraining settings".into()));
        }
        Ok(())
    }
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub task: f64,
    /// Mean over the complete samples seen this epoch.
    pub align: f64,
    pub total: f64,
    pub n_complete_seen: usize,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: Pretrained,
    pub logs: Vec<EpochLog>,
    /// Accuracy of the throwaway head on the unimodal test view.
    pub test_accuracy: f64,
}

fn diverged(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            batch,
            source: Box::new(e),
        },
        other => other,
    }
}

fn single_label_argmax_hits(logits: &crate::tensor::Tensor2D, target: &LabelTarget) -> bool {
    let pred = logits.argmax_rows()[0];
    match target {
        LabelTarget::Single(c) => pred == *c,
        LabelTarget::Multi(bits) => bits.get(pred).copied().unwrap_or(false),
    }
}

/// Trains one encoder and a throwaway head on single-modality
/// classification, then discards the head and freezes every tensor.
pub fn pretrain_unimodal(
    modality: Modality,
    data: &Dataset,
    encoder_cfg: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let input: InputShape = data.config.input_shape(modality);
    let mut pre = Pretrained::build(modality, input, encoder_cfg, cfg.seed)?;
    let base_len = pre.store.len();
    let mut head_rng = stream(cfg.seed, "pretrain_head", &[modality.index() as u64]);
    let head = ClassifierHead::build(
        &mut pre.store,
        "pretrain_head",
        encoder_cfg.d_model,
        data.config.n_classes,
        &mut head_rng,
    );
    let view = |split: &[Sample]| -> Vec<Sample> { split.iter().filter(|s| s.mask.present(modality)).cloned().collect() };
    let train = view(&data.train);
    let test = view(&data.test);
    if train.is_empty() {
        return Err(Error::Empty { op: "pretrain_unimodal" });
    }
    let schedule = Schedule {
        lr: cfg.lr,
        epochs: cfg.epochs,
        warmup_epochs: cfg.warmup_epochs,
        warmup_factor: 0.1,
        poly_power: 0.9,
    };
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let forward = |tape: &mut Tape, store: &crate::autodiff::ParamStore, s: &Sample| -> Result<crate::autodiff::Var> {
        let out = pre.encoder.forward(tape, store, s.raw_or_placeholder(modality), false, None)?;
        let cls = extract(tape, &out, Slot::Cls)?;
        predict(tape, store, cls, &head)
    };
    let mut logs = Vec::with_capacity(cfg.epochs);
    let batch_seed = crate::rng::derive_seed(cfg.seed, "pretrain_batches", &[modality.index() as u64]);
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(epoch, 0.0, &schedule);
        let mut task_sum = 0.0;
        for (bi, batch) in batches(train.len(), cfg.batch_size, batch_seed, epoch)?.iter().enumerate() {
            let mut tape = Tape::new();
            let mut logits = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                logits.push(forward(&mut tape, &pre.store, &train[i]).map_err(|e| diverged(epoch, bi, e))?);
                targets.push(train[i].target.clone());
            }
            let loss = task_loss(&mut tape, &logits, &targets).map_err(|e| diverged(epoch, bi, e))?;
            task_sum += tape.value(loss).item()? * batch.len() as f64;
            pre.store.zero_grad();
            tape.backward(loss, &mut pre.store).map_err(|e| diverged(epoch, bi, e))?;
            opt.step(&mut pre.store, lr)?;
        }
        let task = task_sum / train.len() as f64;
        logs.push(EpochLog {
            epoch,
            lr,
            task,
            align: 0.0,
            total: task,
            n_complete_seen: 0,
        });
    }
    let mut hits = 0usize;
    for s in &test {
        let mut tape = Tape::new();
        let z = forward(&mut tape, &pre.store, s)?;
        if single_label_argmax_hits(tape.value(z), &s.target) {
            hits += 1;
        }
    }
    let test_accuracy = if test.is_empty() { 0.0 } else { hits as f64 / test.len() as f64 };
    pre.store.truncate(base_len);
    pre.store.freeze_all();
    Ok(PretrainOutcome {
        encoder: pre,
        logs,
        test_accuracy,
    })
}

/// Draws the simulated mask of one complete sample.
pub fn sample_dropout(rng: &mut Stream, probs: (f64, f64, f64)) -> PresenceMask {
    let u: f64 = rng.random();
    if u < probs.0 {
        PresenceMask::BOTH
    } else if u < probs.0 + probs.1 {
        PresenceMask::M2_ONLY
    } else {
        PresenceMask::M1_ONLY
    }
}

/// Adaptation stage: trains adapters, proxy tokens and head on a split that
/// is already masked by its training protocol. `on_epoch` sees each log as
/// soon as the epoch ends.
pub fn train_cmpt(
    model: &mut CmptModel,
    train: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty { op: "train_cmpt" });
    }
    if train.iter().any(|s| !s.mask.is_valid()) {
        return Err(Error::NoModality);
    }
    let schedule = cfg.schedule();
    let mut opt = AdamW::new(cfg.adamw());
    let use_dropout = model.arch.spec.mode.uses_dropout();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(epoch, 0.0, &schedule);
        let (mut task_sum, mut align_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut n_complete_seen = 0usize;
        for (it, batch) in batches(train.len(), cfg.batch_size, cfg.seed, epoch)?.iter().enumerate() {
            let mut drop_rng = stream(cfg.seed, "modality_dropout", &[epoch as u64, it as u64]);
            let mut lora_rng = stream(cfg.seed, "lora_dropout", &[epoch as u64, it as u64]);
            let items: Vec<(&Sample, PresenceMask)> = batch
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    let sim = if use_dropout && s.mask.is_complete() {
                        sample_dropout(&mut drop_rng, cfg.dropout_probs)
                    } else {
                        PresenceMask::BOTH
                    };
                    (s, sim)
                })
                .collect();
            let mut tape = Tape::new();
            let step = (|| -> Result<_> {
                let (loss, parts) = model.arch.batch_loss(
                    &mut tape,
                    &model.store,
                    &items,
                    cfg.lambda,
                    cfg.symmetric_align,
                    Some(&mut lora_rng),
                )?;
                if !parts.total.is_finite() {
                    return Err(Error::NonFinite { op: "total_loss" });
                }
                model.store.zero_grad();
                tape.backward(loss, &mut model.store)?;
                Ok(parts)
            })()
            .map_err(|e| diverged(epoch, it, e))?;
            if let Some(clip) = cfg.grad_clip {
                let norm = libm::sqrt(model.store.grad_norm_sq());
                if norm > clip {
                    model.store.scale_grads(clip / norm);
                }
            }
            opt.step(&mut model.store, lr)?;
            let b = batch.len() as f64;
            task_sum += step.task * b;
            total_sum += step.total * b;
            align_sum += step.align * step.n_complete_in_batch as f64;
            n_complete_seen += step.n_complete_in_batch;
        }
        let n = train.len() as f64;
        let log = EpochLog {
            epoch,
            lr,
            task: task_sum / n,
            align: if n_complete_seen == 0 { 0.0 } else { align_sum / n_complete_seen as f64 },
            total: total_sum / n,
            n_complete_seen,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_probabilities() {
        let mut rng = stream(1, "t", &[]);
        let mut counts = [0usize; 3];
        for _ in 0..4000 {
            match sample_dropout(&mut rng, (0.5, 0.25, 0.25)) {
                PresenceMask::BOTH => counts[0] += 1,
                PresenceMask::M2_ONLY => counts[1] += 1,
                _ => counts[2] += 1,
            }
        }
        assert!((1800..2200).contains(&counts[0]), "{counts:?}");
        assert!((850..1150).contains(&counts[1]), "{counts:?}");
        let mut rng = stream(1, "t", &[]);
        for _ in 0..100 {
            assert_eq!(sample_dropout(&mut rng, (1.0, 0.0, 0.0)), PresenceMask::BOTH);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            dropout_probs: (0.5, 0.5, 0.5),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { lambda: -0.1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
