//! The two-encoder classifier: frozen bases, adapters, proxy tokens, gate
//! and head over a single parameter store.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::data::Sample;
use crate::encoder::{extract, CmptInit, EncoderConfig, InputShape, Modality, ModalityEncoder, Slot};
use crate::error::{shape_err, Error, Result};
use crate::fusion::{fuse, gate, predict, ClassifierHead, GateCase, GateOutput, PresenceMask};
use crate::objectives::{alignment_loss, breakdown, task_loss, total_loss, AlignInput, LabelMode, LossBreakdown};
use crate::rng::{gaussian, stream, Stream};
use crate::tensor::Tensor2D;

/// How missing modalities are handled during the adaptation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// No proxy tokens and no modality dropout; an absent input is encoded
    /// from its zero placeholder.
    Baseline,
    /// Modality dropout on the placeholder path, no proxy tokens.
    DropoutOnly,
    /// Proxy tokens, alignment loss and modality dropout.
    Cmpt,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 3] = [TrainingMode::Baseline, TrainingMode::DropoutOnly, TrainingMode::Cmpt];

    pub fn uses_cmpt(self) -> bool {
        self == TrainingMode::Cmpt
    }

    pub fn uses_dropout(self) -> bool {
        self != TrainingMode::Baseline
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::Baseline => "baseline",
            TrainingMode::DropoutOnly => "dropout_only",
            TrainingMode::Cmpt => "cmpt",
        }
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode '{s}'")))
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mode: TrainingMode,
    pub encoder: EncoderConfig,
    pub inputs: [InputShape; 2],
    pub n_classes: usize,
    pub label_mode: LabelMode,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// `8·L·d·r` adapter weights per encoder, `d` per proxy token, plus the head.
    pub fn expected_trainable_count(&self) -> usize {
        let e = &self.encoder;
        let adapters = 8 * e.layers * e.d_model * e.lora.rank;
        let cmpt = if self.mode.uses_cmpt() { e.d_model } else { 0 };
        2 * (adapters + cmpt) + e.d_model * self.n_classes + self.n_classes
    }
}

/// A single-modality encoder outside the two-encoder model, used for
/// unimodal pretraining and as the source of frozen bases.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub modality: Modality,
    pub input: InputShape,
    pub encoder_cfg: EncoderConfig,
    pub store: ParamStore,
    pub encoder: ModalityEncoder,
}

impl Pretrained {
    /// Fresh, fully trainable encoder with no proxy token or adapters.
    pub fn build(modality: Modality, input: InputShape, cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, "pretrain_init", &[modality.index() as u64]);
        let encoder = ModalityEncoder::build(&mut store, modality, input, cfg, false, false, &mut rng)?;
        Ok(Self {
            modality,
            input,
            encoder_cfg: cfg.clone(),
            store,
            encoder,
        })
    }
}

/// Parameter ids and layout of a model; forward passes read values from a
/// separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct CmptArch {
    pub spec: ModelSpec,
    pub encoders: [ModalityEncoder; 2],
    pub head: ClassifierHead,
}

#[derive(Debug, Clone)]
pub struct CmptModel {
    pub store: ParamStore,
    pub arch: CmptArch,
}

/// Tape handles produced by one sample's forward pass.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub logits: Var,
    pub case: GateCase,
    pub cls: [Option<Var>; 2],
    pub cmpt: [Option<Var>; 2],
    /// Last-layer attention per head, empty for encoders that did not run.
    pub attention: [Vec<Var>; 2],
}

/// Final-layer special-token states of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTokens {
    pub cls: [Option<Tensor2D>; 2],
    pub cmpt: [Option<Tensor2D>; 2],
}

impl CmptModel {
    /// Random frozen bases with adapters, proxy tokens (in proxy mode) and a head.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, "model_init", &[]);
        let mut build = |m: Modality, store: &mut ParamStore| {
            ModalityEncoder::build(store, m, spec.inputs[m.index()], &spec.encoder, spec.mode.uses_cmpt(), true, &mut rng)
        };
        let e1 = build(Modality::M1, &mut store)?;
        let e2 = build(Modality::M2, &mut store)?;
        let mut head_rng = stream(seed, "head_init", &[]);
        let head = ClassifierHead::build(&mut store, "head", spec.encoder.d_model, spec.n_classes, &mut head_rng);
        for id in e1.frozen_ids().into_iter().chain(e2.frozen_ids()) {
            store.set_trainable(id, false);
        }
        Ok(Self {
            store,
            arch: CmptArch {
                spec: spec.clone(),
                encoders: [e1, e2],
                head,
            },
        })
    }

    /// Builds a model whose frozen bases are copied from pretrained encoders.
    /// Proxy tokens are re-initialized from the copied class tokens.
    pub fn from_pretrained(spec: &ModelSpec, bases: [&Pretrained; 2], seed: u64) -> Result<Self> {
        let mut model = Self::build(spec, seed)?;
        for m in Modality::BOTH {
            let src = bases[m.index()];
            if src.modality != m {
                return Err(Error::Config(format!("expected a pretrained {} encoder", m.name())));
            }
            let enc = &model.arch.encoders[m.index()];
            for id in enc.frozen_ids() {
                let name = model.store.get(id).name.clone();
                let from = src
                    .store
                    .find(&name)
                    .ok_or_else(|| Error::Config(format!("pretrained encoder lacks '{name}'")))?;
                let value = src.store.value(from);
                if value.shape() != model.store.value(id).shape() {
                    return Err(shape_err("from_pretrained", format!("'{name}' has shape {:?}", value.shape())));
                }
                *model.store.value_mut(id) = value.clone();
            }
            if let Some(cmpt) = enc.specials.cmpt {
                let mut rng = stream(seed, "cmpt_init", &[m.index() as u64]);
                let noise = gaussian(&mut rng, 1, spec.encoder.d_model, spec.encoder.cmpt_init_sigma);
                let init = match spec.encoder.cmpt_init {
                    CmptInit::FromCls => model.store.value(enc.specials.cls).add(&noise)?,
                    CmptInit::Zeros => noise,
                };
                *model.store.value_mut(cmpt) = init;
            }
        }
        Ok(model)
    }

    pub fn predict_logits(&self, sample: &Sample) -> Result<Tensor2D> {
        let mut tape = Tape::new();
        let out = self.arch.forward_sample(&mut tape, &self.store, sample, PresenceMask::BOTH, None)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn tokens(&self, sample: &Sample) -> Result<SampleTokens> {
        let mut tape = Tape::new();
        let out = self.arch.forward_sample(&mut tape, &self.store, sample, PresenceMask::BOTH, None)?;
        let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        Ok(SampleTokens {
            cls: [get(out.cls[0]), get(out.cls[1])],
            cmpt: [get(out.cmpt[0]), get(out.cmpt[1])],
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Ids of every frozen tensor.
    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| !self.store.is_trainable(id)).collect()
    }
}

impl CmptArch {
    /// Runs one sample. `simulated` can hide modalities from the gate on
    /// top of the sample's own mask; LoRA dropout is active iff `train_rng`
    /// is given.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &Sample,
        simulated: PresenceMask,
        mut train_rng: Option<&mut Stream>,
    ) -> Result<SampleOutput> {
        let physical = sample.mask;
        let effective = physical.and(simulated);
        if !effective.is_valid() {
            return Err(Error::NoModality);
        }
        let cmpt_mode = self.spec.mode.uses_cmpt();
        let mut cls = [None, None];
        let mut cmpt = [None, None];
        let mut attention = [Vec::new(), Vec::new()];
        for m in Modality::BOTH {
            let i = m.index();
            let placeholder;
            let raw = if cmpt_mode {
                if !physical.present(m) {
                    continue;
                }
                sample.raw_or_placeholder(m)
            } else if effective.present(m) {
                sample.raw_or_placeholder(m)
            } else {
                placeholder = vec![0.0; self.spec.inputs[i].raw_dim];
                &placeholder
            };
            let enc = &self.encoders[i];
            let out = enc.forward(tape, store, raw, true, train_rng.as_deref_mut())?;
            cls[i] = Some(extract(tape, &out, Slot::Cls)?);
            if cmpt_mode {
                cmpt[i] = Some(extract(tape, &out, Slot::Cmpt)?);
            }
            attention[i] = out.attention;
        }
        let gated = if cmpt_mode {
            gate(effective, cls[0], cls[1], cmpt[0], cmpt[1])?
        } else {
            let case = match (effective.m1_present, effective.m2_present) {
                (true, true) => GateCase::Both,
                (false, _) => GateCase::M1Missing,
                (true, false) => GateCase::M2Missing,
            };
            let need = |v: Option<Var>| v.ok_or(Error::NoModality);
            GateOutput {
                token_a: need(cls[0])?,
                token_b: need(cls[1])?,
                case,
            }
        };
        let fused = fuse(tape, &gated)?;
        let logits = predict(tape, store, fused, &self.head)?;
        Ok(SampleOutput {
            logits,
            case: gated.case,
            cls,
            cmpt,
            attention,
        })
    }

    /// Total loss of a batch of `(sample, simulated mask)` pairs.
    ///
    /// The alignment term covers samples whose modalities are both physically
    /// present, whatever their simulated mask.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[(&Sample, PresenceMask)],
        lambda: f64,
        symmetric: bool,
        train_rng: Option<&mut Stream>,
    ) -> Result<(Var, LossBreakdown)> {
        self.loss_with_targets(tape, store, batch, lambda, symmetric, train_rng, None)
    }

    /// [`Self::batch_loss`], optionally with the class tokens seen by the
    /// alignment term replaced by fixed per-sample values.
    #[allow(clippy::too_many_arguments)]
    fn loss_with_targets(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[(&Sample, PresenceMask)],
        lambda: f64,
        symmetric: bool,
        mut train_rng: Option<&mut Stream>,
        fixed_cls: Option<&[[Option<Tensor2D>; 2]]>,
    ) -> Result<(Var, LossBreakdown)> {
        let mut logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut align_inputs = Vec::new();
        for (i, &(sample, simulated)) in batch.iter().enumerate() {
            let out = self.forward_sample(tape, store, sample, simulated, train_rng.as_deref_mut())?;
            logits.push(out.logits);
            targets.push(sample.target.clone());
            if self.spec.mode.uses_cmpt() {
                let mut cls = out.cls;
                if let Some(fixed) = fixed_cls {
                    for (slot, value) in cls.iter_mut().zip(&fixed[i]) {
                        if let Some(v) = value {
                            *slot = Some(tape.constant(v.clone())?);
                        }
                    }
                }
                align_inputs.push(AlignInput {
                    cmpt1: out.cmpt[0],
                    cls1: cls[0],
                    cmpt2: out.cmpt[1],
                    cls2: cls[1],
                    mask: sample.mask,
                });
            }
        }
        for t in &targets {
            t.validate(self.spec.n_classes)?;
        }
        let task = task_loss(tape, &logits, &targets)?;
        let (align, n_complete) = alignment_loss(tape, &align_inputs, symmetric)?;
        let total = total_loss(tape, task, align, lambda)?;
        let parts = breakdown(
            tape.value(task).item()?,
            tape.value(align).item()?,
            lambda,
            n_complete,
        )?;
        Ok((total, parts))
    }
}

/// Replaces every LoRA `up` factor with `N(0, sigma²)` noise so that
/// gradients reach the `down` factors as well.
pub fn randomize_adapters(model: &mut CmptModel, seed: u64, sigma: f64) {
    let mut rng = stream(seed, "randomize_adapters", &[]);
    for enc in &model.arch.encoders {
        for a in &enc.adapters {
            let (r, c) = model.store.value(a.up).shape();
            *model.store.value_mut(a.up) = gaussian(&mut rng, r, c, sigma);
        }
    }
}

/// Finite-difference check of the full batch loss with respect to the
/// trainable coordinates accepted by `select` (tensor name, flat index).
/// LoRA dropout is off so the loss is deterministic.
///
/// The alignment targets are detached, so the oracle differentiates the loss
/// with the class-token targets held at their current values. The tape
/// gradient of the real training loss must match that oracle too; the larger
/// of both discrepancies is reported.
pub fn gradcheck_model(
    model: &mut CmptModel,
    batch: &[(&Sample, PresenceMask)],
    lambda: f64,
    eps: f64,
    select: impl Fn(&str, usize) -> bool,
) -> Result<crate::gradcheck::GradCheckReport> {
    let arch = &model.arch;
    let mut fixed = Vec::with_capacity(batch.len());
    for &(sample, simulated) in batch {
        let mut tape = Tape::new();
        let out = arch.forward_sample(&mut tape, &model.store, sample, simulated, None)?;
        fixed.push(out.cls.map(|v| v.map(|v| tape.value(v).clone())));
    }
    let mut report = crate::gradcheck::finite_difference_check_at(&mut model.store, eps, select, |store, tape| {
        arch.loss_with_targets(tape, store, batch, lambda, false, None, Some(&fixed))
            .map(|(loss, _)| loss)
    })?;
    let ids = model.store.trainable_ids();
    let oracle: Vec<Tensor2D> = ids
        .iter()
        .map(|&id| model.store.grad(id).cloned().unwrap_or_else(|| {
            let (r, c) = model.store.value(id).shape();
            Tensor2D::zeros(r, c)
        }))
        .collect();
    model.store.zero_grad();
    let mut tape = Tape::new();
    let (loss, _) = arch.batch_loss(&mut tape, &model.store, batch, lambda, false, None)?;
    tape.backward(loss, &mut model.store)?;
    for (&id, want) in ids.iter().zip(&oracle) {
        let got = model.store.grad(id).expect("trainable tensors carry gradients");
        for (i, (g, w)) in got.data().iter().zip(want.data()).enumerate() {
            let err = libm::fabs(g - w) / libm::fmax(1.0, libm::fabs(*w));
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = Some((model.store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Copies every tensor of `src` whose name exists in `dst`, keeping `dst`'s
/// trainable tags. Returns the names that were not found.
pub fn copy_values_by_name(dst: &mut ParamStore, src: &ParamStore) -> Result<Vec<String>> {
    let mut missing = Vec::new();
    for (_, p) in src.iter() {
        match dst.find(&p.name) {
            Some(id) => {
                if dst.value(id).shape() != p.value.shape() {
                    return Err(shape_err("copy_values_by_name", format!("'{}' shape differs", p.name)));
                }
                *dst.value_mut(id) = p.value.clone();
            }
            None => missing.push(p.name.clone()),
        }
    }
    Ok(missing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::LoraConfig;
    use crate::objectives::LabelTarget;

    pub(crate) fn tiny_spec(mode: TrainingMode) -> ModelSpec {
        ModelSpec {
            mode,
            encoder: EncoderConfig {
                d_model: 4,
                heads: 2,
                layers: 1,
                ff_dim: 8,
                lora: LoraConfig { rank: 1, alpha: 1.0, dropout: 0.0 },
                ..EncoderConfig::default()
            },
            inputs: [InputShape { raw_dim: 6, patch_size: 2 }, InputShape { raw_dim: 4, patch_size: 2 }],
            n_classes: 3,
            label_mode: LabelMode::Single,
        }
    }

    fn sample(mask: PresenceMask) -> Sample {
        let mut s = Sample {
            raw_m1: vec![0.3, -0.1, 0.8, 0.5, -0.7, 0.2],
            raw_m2: vec![1.0, -0.4, 0.6, 0.1],
            mask,
            target: LabelTarget::Single(2),
        };
        if !mask.m1_present {
            s.raw_m1.iter_mut().for_each(|v| *v = 0.0);
        }
        if !mask.m2_present {
            s.raw_m2.iter_mut().for_each(|v| *v = 0.0);
        }
        s
    }

    #[test]
    fn trainable_count_matches_formula() {
        for mode in TrainingMode::ALL {
            let spec = tiny_spec(mode);
            let m = CmptModel::build(&spec, 1).unwrap();
            assert_eq!(m.trainable_count(), spec.expected_trainable_count(), "{mode}");
        }
    }

    #[test]
    fn gate_cases_follow_mask() {
        let m = CmptModel::build(&tiny_spec(TrainingMode::Cmpt), 2).unwrap();
        let mut t = Tape::new();
        for (mask, case) in [
            (PresenceMask::BOTH, GateCase::Both),
            (PresenceMask::M1_ONLY, GateCase::M2Missing),
            (PresenceMask::M2_ONLY, GateCase::M1Missing),
        ] {
            let out = m.arch.forward_sample(&mut t, &m.store, &sample(mask), PresenceMask::BOTH, None).unwrap();
            assert_eq!(out.case, case);
            assert_eq!(out.cls[0].is_some(), mask.m1_present);
            assert_eq!(out.cls[1].is_some(), mask.m2_present);
        }
        let s = sample(PresenceMask::BOTH);
        let out = m.arch.forward_sample(&mut t, &m.store, &s, PresenceMask::M1_ONLY, None).unwrap();
        assert_eq!(out.case, GateCase::M2Missing);
        assert!(out.cls[1].is_some(), "complete samples run both encoders");
    }

    #[test]
    fn simulated_drop_equals_physical_drop_for_prediction() {
        let m = CmptModel::build(&tiny_spec(TrainingMode::Cmpt), 3).unwrap();
        let mut t = Tape::new();
        let full = sample(PresenceMask::BOTH);
        let sim = m.arch.forward_sample(&mut t, &m.store, &full, PresenceMask::M1_ONLY, None).unwrap();
        let mut phys = full.clone();
        phys.mask = PresenceMask::M1_ONLY;
        let real = m.arch.forward_sample(&mut t, &m.store, &phys, PresenceMask::BOTH, None).unwrap();
        assert_eq!(t.value(sim.logits), t.value(real.logits));
    }

    #[test]
    fn baseline_encodes_placeholders() {
        let m = CmptModel::build(&tiny_spec(TrainingMode::Baseline), 4).unwrap();
        let mut t = Tape::new();
        let out = m
            .arch
            .forward_sample(&mut t, &m.store, &sample(PresenceMask::M1_ONLY), PresenceMask::BOTH, None)
            .unwrap();
        assert!(out.cls[1].is_some());
        assert!(out.cmpt.iter().all(Option::is_none));
        assert_eq!(out.case, GateCase::M2Missing);
    }

    #[test]
    fn batch_loss_aligns_only_complete() {
        let m = CmptModel::build(&tiny_spec(TrainingMode::Cmpt), 5).unwrap();
        let (a, b) = (sample(PresenceMask::BOTH), sample(PresenceMask::M2_ONLY));
        let mut t = Tape::new();
        let (_, p) = m
            .arch
            .batch_loss(&mut t, &m.store, &[(&a, PresenceMask::M2_ONLY), (&b, PresenceMask::BOTH)], 0.2, false, None)
            .unwrap();
        assert_eq!(p.n_complete_in_batch, 1);
        assert!((p.total - (p.task + 0.2 * p.align)).abs() < 1e-12);
    }

    #[test]
    fn from_pretrained_copies_and_freezes() {
        let spec = tiny_spec(TrainingMode::Cmpt);
        let p1 = Pretrained::build(Modality::M1, spec.inputs[0], &spec.encoder, 9).unwrap();
        let p2 = Pretrained::build(Modality::M2, spec.inputs[1], &spec.encoder, 9).unwrap();
        let m = CmptModel::from_pretrained(&spec, [&p1, &p2], 1).unwrap();
        let wq = m.store.find("m1.layer0.attn.wq").unwrap();
        assert_eq!(m.store.value(wq), p1.store.value(p1.store.find("m1.layer0.attn.wq").unwrap()));
        assert!(!m.store.is_trainable(wq));
        let cls = m.store.value(m.store.find("m2.cls").unwrap());
        let cmpt = m.store.value(m.store.find("m2.cmpt").unwrap());
        let gap = cls.sub(cmpt).unwrap().norm_sq();
        assert!(gap > 0.0 && gap < 0.1);
        assert!(CmptModel::from_pretrained(&spec, [&p2, &p1], 1).is_err());
    }
}
