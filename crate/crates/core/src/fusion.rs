//! Availability gate, additive fusion and the linear classifier head.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::{gaussian, Stream};
use crate::tensor::Tensor2D;

/// Which modalities a sample carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PresenceMask {
    pub m1_present: bool,
    pub m2_present: bool,
}

impl PresenceMask {
    pub const BOTH: Self = Self::new(true, true);
    pub const M1_ONLY: Self = Self::new(true, false);
    pub const M2_ONLY: Self = Self::new(false, true);

    pub const fn new(m1_present: bool, m2_present: bool) -> Self {
        Self {
            m1_present,
            m2_present,
        }
    }

    pub fn is_complete(self) -> bool {
        self.m1_present && self.m2_present
    }

    pub fn is_valid(self) -> bool {
        self.m1_present || self.m2_present
    }

    pub fn present(self, m: crate::encoder::Modality) -> bool {
        match m {
            crate::encoder::Modality::M1 => self.m1_present,
            crate::encoder::Modality::M2 => self.m2_present,
        }
    }

    /// Intersection of two masks.
    pub fn and(self, other: Self) -> Self {
        Self::new(
            self.m1_present && other.m1_present,
            self.m2_present && other.m2_present,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateCase {
    Both,
    M1Missing,
    M2Missing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateOutput<T> {
    pub token_a: T,
    pub token_b: T,
    pub case: GateCase,
}

/// Selects the two tokens to fuse for a sample.
///
/// Both present → `(cls1, cls2)`; m1 missing → `(cls2, cmpt2)`;
/// m2 missing → `(cls1, cmpt1)`. Tokens of absent modalities may be `None`.
pub fn gate<T: Copy>(
    mask: PresenceMask,
    cls1: Option<T>,
    cls2: Option<T>,
    cmpt1: Option<T>,
    cmpt2: Option<T>,
) -> Result<GateOutput<T>> {
    let need = |t: Option<T>, what: &str| t.ok_or_else(|| invalid("gate", format!("missing {what}")));
    match (mask.m1_present, mask.m2_present) {
        (true, true) => Ok(GateOutput {
            token_a: need(cls1, "cls1")?,
            token_b: need(cls2, "cls2")?,
            case: GateCase::Both,
        }),
        (false, true) => Ok(GateOutput {
            token_a: need(cls2, "cls2")?,
            token_b: need(cmpt2, "cmpt2")?,
            case: GateCase::M1Missing,
        }),
        (true, false) => Ok(GateOutput {
            token_a: need(cls1, "cls1")?,
            token_b: need(cmpt1, "cmpt1")?,
            case: GateCase::M2Missing,
        }),
        (false, false) => Err(Error::NoModality),
    }
}

/// Additive fusion `token_a + token_b`.
pub fn fuse(tape: &mut Tape, g: &GateOutput<Var>) -> Result<Var> {
    let (a, b) = (tape.value(g.token_a), tape.value(g.token_b));
    if a.shape() != b.shape() {
        return Err(shape_err("fuse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    tape.add(g.token_a, g.token_b)
}

/// Linear head `t·weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ClassifierHead {
    pub fn build(store: &mut ParamStore, prefix: &str, d: usize, classes: usize, rng: &mut Stream) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            gaussian(rng, d, classes, 1.0 / libm::sqrt(d as f64)),
            true,
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor2D::zeros(1, classes), true);
        Self { weight, bias }
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.value(self.weight).data().len() + store.value(self.bias).data().len()
    }
}

/// Logits of a fused `1×d` token; no activation.
pub fn predict(tape: &mut Tape, store: &ParamStore, token: Var, head: &ClassifierHead) -> Result<Var> {
    let w = tape.param(store, head.weight)?;
    let b = tape.param(store, head.bias)?;
    let t = tape.value(token);
    if t.rows() != 1 {
        return Err(shape_err("predict", "fused token must be 1xd"));
    }
    let z = tape.matmul(token, w)?;
    tape.add_bias(z, b)
}
