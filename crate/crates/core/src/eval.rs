//! Protocol-driven evaluation, missing-rate sweeps, per-class deltas,
//! ablation grids and diagnostic dumps.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{apply_protocol, MissingProtocol, Sample};
use crate::encoder::Modality;
use crate::error::{invalid, Error, Result};
use crate::fusion::{GateCase, PresenceMask};
use crate::metrics::{compute_metrics, decide, Metrics};
use crate::model::{CmptModel, ModelSpec, Pretrained, TrainingMode};
use crate::objectives::LabelTarget;
use crate::rng::{derive_seed, permutation, stream};
use crate::train::{train_cmpt, TrainConfig};

/// Predicted label and gate case of every sample of an already-masked split.
pub fn predict_split(model: &CmptModel, split: &[Sample]) -> Result<Vec<(LabelTarget, GateCase)>> {
    let mode = model.arch.spec.label_mode;
    split
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let out = model
                .arch
                .forward_sample(&mut tape, &model.store, s, PresenceMask::BOTH, None)?;
            Ok((decide(tape.value(out.logits), mode)?, out.case))
        })
        .collect()
}

/// Metrics of an already-masked split.
pub fn evaluate_split(model: &CmptModel, split: &[Sample]) -> Result<Metrics> {
    let preds: Vec<LabelTarget> = predict_split(model, split)?.into_iter().map(|(p, _)| p).collect();
    let targets: Vec<LabelTarget> = split.iter().map(|s| s.target.clone()).collect();
    compute_metrics(&preds, &targets, model.arch.spec.n_classes)
}

/// Masks a complete split with `protocol` (drawn from `seed`) and scores it.
pub fn evaluate(model: &CmptModel, test: &[Sample], protocol: &MissingProtocol, seed: u64) -> Result<Metrics> {
    let (masked, _) = apply_protocol(test, protocol, seed)?;
    let mut m = evaluate_split(model, &masked)?;
    m.protocol = Some(protocol.to_string());
    Ok(m)
}

/// The three availability cases every ablation cell is scored under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Both,
    M1Missing,
    M2Missing,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Both, Scenario::M1Missing, Scenario::M2Missing];

    pub fn protocol(self) -> MissingProtocol {
        match self {
            Scenario::Both => MissingProtocol::Complete,
            Scenario::M1Missing => MissingProtocol::InferenceOnly { missing: Modality::M1 },
            Scenario::M2Missing => MissingProtocol::InferenceOnly { missing: Modality::M2 },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Both => "both",
            Scenario::M1Missing => "m1_missing",
            Scenario::M2Missing => "m2_missing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub scenario: Scenario,
    pub metrics: Metrics,
}

pub fn evaluate_scenarios(model: &CmptModel, test: &[Sample], seed: u64) -> Result<Vec<ScenarioMetrics>> {
    Scenario::ALL
        .iter()
        .map(|&scenario| {
            Ok(ScenarioMetrics {
                scenario,
                metrics: evaluate(model, test, &scenario.protocol(), seed)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub x_pct: f64,
    pub metrics: Metrics,
}

/// Evaluations at `(100 %, x %)` availability, or `(x %, 100 %)` when m1
/// is the varying modality. Rows run from the largest `x` down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub varying: Modality,
    pub rows: Vec<SweepRow>,
}

pub fn sweep_missing(
    model: &CmptModel,
    test: &[Sample],
    varying: Modality,
    x_values: &[f64],
    seed: u64,
) -> Result<SweepResult> {
    let rows = sweep_points(x_values)?
        .into_iter()
        .map(|x| sweep_point(model, test, varying, x, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { varying, rows })
}

/// One sweep evaluation; the masking seed is derived from `seed` and `x_pct`.
pub fn sweep_point(model: &CmptModel, test: &[Sample], varying: Modality, x_pct: f64, seed: u64) -> Result<SweepRow> {
    let protocol = MissingProtocol::SweepPoint { varying, x_pct };
    let point_seed = derive_seed(seed, "sweep", &[x_pct.to_bits()]);
    Ok(SweepRow {
        x_pct,
        metrics: evaluate(model, test, &protocol, point_seed)?,
    })
}

/// Validates sweep points and orders them descending.
pub fn sweep_points(x_values: &[f64]) -> Result<Vec<f64>> {
    if x_values.is_empty() {
        return Err(invalid("sweep_missing", "no sweep points"));
    }
    let mut xs = x_values.to_vec();
    if xs.iter().any(|x| !(0.0..=100.0).contains(x)) {
        return Err(Error::InfeasibleProtocol("sweep points must lie in [0, 100]".into()));
    }
    xs.sort_by(|a, b| b.total_cmp(a));
    if xs.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid("sweep_missing", "duplicate sweep point"));
    }
    Ok(xs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub class: usize,
    pub f1_with: f64,
    pub f1_without: f64,
    pub delta: f64,
}

/// Per-class F1 improvement of `with` over `without`, largest first.
pub fn per_class_delta(with: &Metrics, without: &Metrics) -> Result<Vec<ClassDelta>> {
    if with.per_class_f1.len() != without.per_class_f1.len() {
        return Err(invalid(
            "per_class_delta",
            format!("{} vs {} classes", with.per_class_f1.len(), without.per_class_f1.len()),
        ));
    }
    let mut rows: Vec<ClassDelta> = with
        .per_class_f1
        .iter()
        .zip(&without.per_class_f1)
        .enumerate()
        .map(|(class, (&a, &b))| ClassDelta {
            class,
            f1_with: a,
            f1_without: b,
            delta: a - b,
        })
        .collect();
    rows.sort_by(|x, y| y.delta.total_cmp(&x.delta).then(x.class.cmp(&y.class)));
    Ok(rows)
}

/// The hyperparameter an ablation varies, with its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum AblationAxis {
    Lambda(Vec<f64>),
    Rank(Vec<usize>),
    Mode(Vec<TrainingMode>),
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Lambda(_) => "lambda",
            AblationAxis::Rank(_) => "rank",
            AblationAxis::Mode(_) => "mode",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AblationAxis::Lambda(v) => v.len(),
            AblationAxis::Rank(v) => v.len(),
            AblationAxis::Mode(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, i: usize) -> String {
        match self {
            AblationAxis::Lambda(v) => format!("{}", v[i]),
            AblationAxis::Rank(v) => format!("{}", v[i]),
            AblationAxis::Mode(v) => v[i].name().to_string(),
        }
    }

    fn apply(&self, i: usize, spec: &mut ModelSpec, cfg: &mut TrainConfig) {
        match self {
            AblationAxis::Lambda(v) => cfg.lambda = v[i],
            AblationAxis::Rank(v) => spec.encoder.lora.rank = v[i],
            AblationAxis::Mode(v) => spec.mode = v[i],
        }
    }
}

/// Shared inputs of every ablation cell.
#[derive(Debug, Clone)]
pub struct AblationSetup<'a> {
    pub spec: ModelSpec,
    pub bases: [&'a Pretrained; 2],
    /// Training split, already masked by its protocol.
    pub train: &'a [Sample],
    /// Complete test split.
    pub test: &'a [Sample],
    pub train_cfg: TrainConfig,
    pub model_seed: u64,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub value: String,
    pub trainable_params: usize,
    pub scenarios: Vec<ScenarioMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub cells: Vec<AblationCell>,
}

/// Trains and scores cell `i`; failures carry the cell label.
pub fn ablation_cell(setup: &AblationSetup<'_>, axis: &AblationAxis, i: usize) -> Result<AblationCell> {
    let label = axis.label(i);
    let wrap = |e: Error| Error::Cell {
        cell: format!("{}={label}", axis.name()),
        source: alloc::boxed::Box::new(e),
    };
    let mut spec = setup.spec.clone();
    let mut cfg = setup.train_cfg.clone();
    axis.apply(i, &mut spec, &mut cfg);
    let mut model = CmptModel::from_pretrained(&spec, setup.bases, setup.model_seed).map_err(wrap)?;
    train_cmpt(&mut model, setup.train, &cfg, |_| {}).map_err(wrap)?;
    Ok(AblationCell {
        value: label.clone(),
        trainable_params: model.trainable_count(),
        scenarios: evaluate_scenarios(&model, setup.test, setup.eval_seed).map_err(wrap)?,
    })
}

pub fn run_ablation(setup: &AblationSetup<'_>, axis: &AblationAxis) -> Result<AblationGrid> {
    if axis.is_empty() {
        return Err(invalid("run_ablation", "no axis values"));
    }
    let cells = (0..axis.len())
        .map(|i| ablation_cell(setup, axis, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationGrid {
        axis: axis.clone(),
        cells,
    })
}

/// Last-layer attention rows of the special tokens for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAttention {
    pub cls: Vec<f64>,
    pub cmpt: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub modality: Modality,
    pub heads: Vec<HeadAttention>,
}

/// Attention rows of every encoder that runs for `sample`.
pub fn attention_dump(model: &CmptModel, sample: &Sample) -> Result<Vec<AttentionDump>> {
    let mut tape = Tape::new();
    let out = model
        .arch
        .forward_sample(&mut tape, &model.store, sample, PresenceMask::BOTH, None)?;
    let with_cmpt = model.arch.spec.mode.uses_cmpt();
    let slots = crate::encoder::SlotMap::new(with_cmpt);
    let mut dumps = Vec::new();
    for m in Modality::BOTH {
        let heads = &out.attention[m.index()];
        if heads.is_empty() {
            continue;
        }
        dumps.push(AttentionDump {
            modality: m,
            heads: heads
                .iter()
                .map(|&h| {
                    let a = tape.value(h);
                    HeadAttention {
                        cls: a.row(slots.cls).to_vec(),
                        cmpt: slots.cmpt.map(|r| a.row(r).to_vec()),
                    }
                })
                .collect(),
        });
    }
    Ok(dumps)
}

/// How closely proxy tokens track the other modality's class token on
/// complete samples, next to a mismatched-pair control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyAlignment {
    /// Mean `mse(cmpt1, cls2)`.
    pub cmpt1_to_cls2: f64,
    /// Mean `mse(cmpt2, cls1)`.
    pub cmpt2_to_cls1: f64,
    /// Mean `mse(cls2_i, cls2_j)` over shuffled pairs `i ≠ j`.
    pub shuffled_cls2: f64,
    pub n_samples: usize,
}

pub fn proxy_alignment(model: &CmptModel, split: &[Sample], seed: u64) -> Result<ProxyAlignment> {
    if !model.arch.spec.mode.uses_cmpt() {
        return Err(invalid("proxy_alignment", "model has no proxy tokens"));
    }
    let complete: Vec<&Sample> = split.iter().filter(|s| s.mask.is_complete()).collect();
    if complete.len() < 2 {
        return Err(Error::Empty { op: "proxy_alignment" });
    }
    let mse = |a: &crate::tensor::Tensor2D, b: &crate::tensor::Tensor2D| -> f64 {
        a.sub(b).map(|d| d.norm_sq() / d.data().len() as f64).unwrap_or(f64::NAN)
    };
    let mut tokens = Vec::with_capacity(complete.len());
    for s in &complete {
        tokens.push(model.tokens(s)?);
    }
    let unwrap = |t: &Option<crate::tensor::Tensor2D>| t.clone().ok_or(Error::NoModality);
    let (mut a, mut b) = (0.0, 0.0);
    for t in &tokens {
        a += mse(&unwrap(&t.cmpt[0])?, &unwrap(&t.cls[1])?);
        b += mse(&unwrap(&t.cmpt[1])?, &unwrap(&t.cls[0])?);
    }
    let n = tokens.len();
    let order = permutation(&mut stream(seed, "shuffled_pairs", &[]), n);
    let mut c = 0.0;
    for j in 0..n {
        let (p, q) = (order[j], order[(j + 1) % n]);
        c += mse(&unwrap(&tokens[p].cls[1])?, &unwrap(&tokens[q].cls[1])?);
    }
    let nf = n as f64;
    Ok(ProxyAlignment {
        cmpt1_to_cls2: a / nf,
        cmpt2_to_cls1: b / nf,
        shuffled_cls2: c / nf,
        n_samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(f1: &[f64]) -> Metrics {
        Metrics {
            accuracy: 0.0,
            f1_macro: 0.0,
            f1_micro: 0.0,
            per_class_f1: f1.to_vec(),
            support: alloc::vec![1; f1.len()],
            protocol: None,
        }
    }

    #[test]
    fn deltas_sorted() {
        let same = per_class_delta(&metrics(&[0.5, 0.6]), &metrics(&[0.5, 0.6])).unwrap();
        assert!(same.iter().all(|d| d.delta == 0.0));
        let d = per_class_delta(&metrics(&[0.5, 0.9, 0.4]), &metrics(&[0.5, 0.6, 0.4])).unwrap();
        assert_eq!(d[0].class, 1);
        assert!(per_class_delta(&metrics(&[0.5]), &metrics(&[0.5, 0.6])).is_err());
    }

    #[test]
    fn sweep_point_order() {
        assert_eq!(sweep_points(&[0.0, 50.0, 100.0, 25.0]).unwrap(), [100.0, 50.0, 25.0, 0.0]);
        assert!(sweep_points(&[10.0, 10.0]).is_err());
        assert!(sweep_points(&[120.0]).is_err());
        assert!(sweep_points(&[]).is_err());
    }

    #[test]
    fn axis_labels() {
        let a = AblationAxis::Mode(TrainingMode::ALL.to_vec());
        assert_eq!(a.len(), 3);
        assert_eq!(a.label(1), "dropout_only");
        assert_eq!(AblationAxis::Lambda(alloc::vec![0.0, 0.2]).label(1), "0.2");
    }
}
