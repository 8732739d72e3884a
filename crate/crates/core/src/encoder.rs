//! Per-modality transformer encoder with proxy and class token slots.
//!
//! Raw modality vectors are cut into fixed-size patches and linearly
//! projected to tokens. The assembled sequence is `[CMPT, CLS, content…]`
//! (or `[CLS, content…]` for models without a proxy token) and runs through
//! a pre-norm transformer whose query/key/value/output projections can carry
//! rank-r LoRA adapters.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::{gaussian, Stream};
use crate::tensor::Tensor2D;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    M1,
    M2,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::M1, Modality::M2];

    pub fn index(self) -> usize {
        match self {
            Modality::M1 => 0,
            Modality::M2 => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::M1 => Modality::M2,
            Modality::M2 => Modality::M1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::M1 => "m1",
            Modality::M2 => "m2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmptInit {
    /// Copy of the frozen class token plus Gaussian noise.
    FromCls,
    /// Gaussian noise around zero.
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            alpha: 1.0,
            dropout: 0.1,
        }
    }
}

/// Transformer shape shared by both modality encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub ln_eps: f64,
    pub lora: LoraConfig,
    pub cmpt_init: CmptInit,
    pub cmpt_init_sigma: f64,
    /// Blocks every token except the proxy itself from attending to the
    /// proxy token, so class-token outputs do not depend on it.
    pub isolate_cls_from_cmpt: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            layers: 2,
            ff_dim: 64,
            ln_eps: 1e-5,
            lora: LoraConfig::default(),
            cmpt_init: CmptInit::FromCls,
            cmpt_init_sigma: 0.02,
            isolate_cls_from_cmpt: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.lora.rank == 0 {
            return Err(Error::Config("lora rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.lora.dropout) {
            return Err(Error::Config("lora dropout must lie in [0, 1)".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Patch projection and positional table (frozen after pretraining).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams {
    pub patch_size: usize,
    pub projection: ParamId,
    pub positional: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecialTokens {
    pub cls: ParamId,
    pub cmpt: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff1: ParamId,
    pub ff1_bias: ParamId,
    pub ff2: ParamId,
    pub ff2_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBase {
    pub layers: Vec<LayerWeights>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub heads: usize,
    pub d_model: usize,
    pub ln_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [
        LoraTarget::Query,
        LoraTarget::Key,
        LoraTarget::Value,
        LoraTarget::Output,
    ];

    fn short(self) -> &'static str {
        match self {
            LoraTarget::Query => "q",
            LoraTarget::Key => "k",
            LoraTarget::Value => "v",
            LoraTarget::Output => "o",
        }
    }
}

/// Low-rank update `(alpha/r)·drop(x·down)·up` attached to one frozen weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub target: LoraTarget,
    pub layer: usize,
}

/// Row positions of the special tokens in an assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotMap {
    pub cmpt: Option<usize>,
    pub cls: usize,
    pub content_start: usize,
}

impl SlotMap {
    pub fn new(with_cmpt: bool) -> Self {
        if with_cmpt {
            Self {
                cmpt: Some(0),
                cls: 1,
                content_start: 2,
            }
        } else {
            Self {
                cmpt: None,
                cls: 0,
                content_start: 1,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Cmpt,
    Cls,
}

#[derive(Debug, Clone, Copy)]
pub struct AssembledSequence {
    pub tokens: Var,
    pub slots: SlotMap,
    pub content_len: usize,
}

#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub tokens: Var,
    pub slots: SlotMap,
    /// Last-layer attention probabilities, one `(N+2)×(N+2)` matrix per head.
    pub attention: Vec<Var>,
}

/// Reshapes `raw` into patches, projects them and adds positional rows.
pub fn embed(tape: &mut Tape, store: &ParamStore, raw: &[f64], params: &EmbedderParams) -> Result<Var> {
    let p = params.patch_size;
    if p == 0 || !raw.len().is_multiple_of(p) {
        return Err(shape_err(
            "embed",
            format!("raw length {} not divisible by patch size {p}", raw.len()),
        ));
    }
    let n = raw.len() / p;
    let max_tokens = store.value(params.positional).rows();
    if n > max_tokens {
        return Err(shape_err(
            "embed",
            format!("{n} tokens exceed positional table of {max_tokens}"),
        ));
    }
    let patches = tape.constant(Tensor2D::from_vec(n, p, raw.to_vec())?)?;
    let proj = tape.param(store, params.projection)?;
    let tokens = tape.matmul(patches, proj)?;
    let pos_all = tape.param(store, params.positional)?;
    let pos = tape.slice_rows(pos_all, 0, n)?;
    tape.add(tokens, pos)
}

/// Prepends the proxy (if any) and class tokens to the content tokens.
pub fn assemble(
    tape: &mut Tape,
    store: &ParamStore,
    content: Var,
    specials: &SpecialTokens,
) -> Result<AssembledSequence> {
    let cls = tape.param(store, specials.cls)?;
    let d = tape.value(cls).cols();
    let c = tape.value(content);
    if c.cols() != d && c.rows() > 0 {
        return Err(shape_err(
            "assemble",
            format!("content has {} columns, tokens have {d}", c.cols()),
        ));
    }
    let content_len = c.rows();
    let mut parts = Vec::with_capacity(3);
    if let Some(cmpt) = specials.cmpt {
        parts.push(tape.param(store, cmpt)?);
    }
    parts.push(cls);
    if content_len > 0 {
        parts.push(content);
    }
    let tokens = tape.concat_rows(&parts)?;
    Ok(AssembledSequence {
        tokens,
        slots: SlotMap::new(specials.cmpt.is_some()),
        content_len,
    })
}

/// `x·W`, plus the adapter's low-rank path when one is attached.
///
/// Dropout on the rank-r bottleneck is applied only when `train_rng` is given.
pub fn lora_apply(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    base_w: ParamId,
    adapter: Option<&LoraAdapter>,
    train_rng: Option<&mut Stream>,
) -> Result<Var> {
    let w = tape.param(store, base_w)?;
    let base = tape.matmul(x, w)?;
    let Some(ad) = adapter else {
        return Ok(base);
    };
    if ad.rank == 0 {
        return Err(invalid("lora_apply", "rank must be at least 1"));
    }
    let down = tape.param(store, ad.down)?;
    let up = tape.param(store, ad.up)?;
    let mut h = tape.matmul(x, down)?;
    if let Some(rng) = train_rng {
        if ad.dropout_p > 0.0 {
            let (rows, cols) = tape.value(h).shape();
            let keep = 1.0 / (1.0 - ad.dropout_p);
            let mut mask = Tensor2D::zeros(rows, cols);
            for m in mask.data_mut() {
                *m = if rng.random::<f64>() < ad.dropout_p { 0.0 } else { keep };
            }
            let mask = tape.constant(mask)?;
            h = tape.mul(h, mask)?;
        }
    }
    let delta = tape.matmul(h, up)?;
    let delta = tape.scale(delta, ad.alpha / ad.rank as f64)?;
    tape.add(base, delta)
}

fn find_adapter(adapters: &[LoraAdapter], layer: usize, target: LoraTarget) -> Result<&LoraAdapter> {
    adapters
        .iter()
        .find(|a| a.layer == layer && a.target == target)
        .ok_or_else(|| Error::MissingAdapter(format!("layer {layer} {target:?}")))
}

/// Runs the pre-norm transformer stack over an assembled sequence.
///
/// `adapters: None` is the adapter-free frozen forward; with `Some`, every
/// query/key/value/output projection of every layer must have an adapter.
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    seq: &AssembledSequence,
    base: &EncoderBase,
    adapters: Option<&[LoraAdapter]>,
    isolate_cls_from_cmpt: bool,
    mut train_rng: Option<&mut Stream>,
) -> Result<EncodedSequence> {
    let d = base.d_model;
    let (s, cols) = tape.value(seq.tokens).shape();
    if cols != d {
        return Err(shape_err("encode", format!("sequence width {cols}, model width {d}")));
    }
    let dh = d / base.heads;
    let inv_sqrt = 1.0 / libm::sqrt(dh as f64);
    let mask = match (isolate_cls_from_cmpt, seq.slots.cmpt) {
        (true, Some(cmpt)) => {
            let mut m = Tensor2D::zeros(s, s);
            for row in (0..s).filter(|&r| r != cmpt) {
                m.set(row, cmpt, -1e9);
            }
            Some(tape.constant(m)?)
        }
        _ => None,
    };

    let mut x = seq.tokens;
    let mut attention = Vec::new();
    for (li, lw) in base.layers.iter().enumerate() {
        let ad = |t: LoraTarget| -> Result<Option<&LoraAdapter>> {
            adapters.map(|a| find_adapter(a, li, t)).transpose()
        };
        let g1 = tape.param(store, lw.ln1_gain)?;
        let b1 = tape.param(store, lw.ln1_bias)?;
        let h = tape.layer_norm_rows(x, g1, b1, base.ln_eps)?;
        let q = lora_apply(tape, store, h, lw.wq, ad(LoraTarget::Query)?, train_rng.as_deref_mut())?;
        let k = lora_apply(tape, store, h, lw.wk, ad(LoraTarget::Key)?, train_rng.as_deref_mut())?;
        let v = lora_apply(tape, store, h, lw.wv, ad(LoraTarget::Value)?, train_rng.as_deref_mut())?;

        let mut heads = Vec::with_capacity(base.heads);
        let mut probs = Vec::with_capacity(base.heads);
        for hi in 0..base.heads {
            let qh = tape.slice_cols(q, hi * dh, dh)?;
            let kh = tape.slice_cols(k, hi * dh, dh)?;
            let vh = tape.slice_cols(v, hi * dh, dh)?;
            let scores = tape.matmul_t(qh, kh)?;
            let mut scores = tape.scale(scores, inv_sqrt)?;
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let p = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(p, vh)?);
            probs.push(p);
        }
        let attn = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let o = lora_apply(tape, store, attn, lw.wo, ad(LoraTarget::Output)?, train_rng.as_deref_mut())?;
        x = tape.add(x, o)?;

        let g2 = tape.param(store, lw.ln2_gain)?;
        let b2 = tape.param(store, lw.ln2_bias)?;
        let h2 = tape.layer_norm_rows(x, g2, b2, base.ln_eps)?;
        let w1 = tape.param(store, lw.ff1)?;
        let f = tape.matmul(h2, w1)?;
        let fb1 = tape.param(store, lw.ff1_bias)?;
        let f = tape.add_bias(f, fb1)?;
        let f = tape.gelu(f)?;
        let w2 = tape.param(store, lw.ff2)?;
        let f = tape.matmul(f, w2)?;
        let fb2 = tape.param(store, lw.ff2_bias)?;
        let f = tape.add_bias(f, fb2)?;
        x = tape.add(x, f)?;
        attention = probs;
    }
    let gf = tape.param(store, base.final_gain)?;
    let bf = tape.param(store, base.final_bias)?;
    let tokens = tape.layer_norm_rows(x, gf, bf, base.ln_eps)?;
    Ok(EncodedSequence {
        tokens,
        slots: seq.slots,
        attention,
    })
}

/// The `1×d` output row at the proxy or class slot.
pub fn extract(tape: &mut Tape, out: &EncodedSequence, which: Slot) -> Result<Var> {
    let row = match which {
        Slot::Cls => out.slots.cls,
        Slot::Cmpt => out
            .slots
            .cmpt
            .ok_or_else(|| invalid("extract", "sequence has no proxy slot"))?,
    };
    tape.slice_rows(out.tokens, row, 1)
}

/// One modality's complete encoder: embedder, special tokens, frozen base
/// and (optionally) its LoRA adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEncoder {
    pub modality: Modality,
    pub embedder: EmbedderParams,
    pub specials: SpecialTokens,
    pub base: EncoderBase,
    pub adapters: Vec<LoraAdapter>,
    pub isolate_cls_from_cmpt: bool,
}

/// Shape of one modality's raw input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub raw_dim: usize,
    pub patch_size: usize,
}

impl InputShape {
    pub fn tokens(self) -> usize {
        self.raw_dim / self.patch_size
    }
}

impl ModalityEncoder {
    /// Registers freshly initialized base weights (all trainable), a class
    /// token, and optionally a proxy token and LoRA adapters.
    pub fn build(
        store: &mut ParamStore,
        modality: Modality,
        input: InputShape,
        cfg: &EncoderConfig,
        with_cmpt: bool,
        with_lora: bool,
        rng: &mut Stream,
    ) -> Result<Self> {
        cfg.validate()?;
        if input.patch_size == 0 || !input.raw_dim.is_multiple_of(input.patch_size) {
            return Err(Error::Config(format!(
                "{}: raw dim {} not divisible by patch size {}",
                modality.name(),
                input.raw_dim,
                input.patch_size
            )));
        }
        let d = cfg.d_model;
        let pre = modality.name();
        let name = |s: &str| -> String { format!("{pre}.{s}") };
        let fan = |n: usize| 1.0 / libm::sqrt(n as f64);

        let projection = store.add(
            name("embed.projection"),
            gaussian(rng, input.patch_size, d, fan(input.patch_size)),
            true,
        );
        let positional = store.add(
            name("embed.positional"),
            gaussian(rng, input.tokens(), d, 0.1),
            true,
        );
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let ln = |s: &str| -> String { format!("{pre}.layer{l}.{s}") };
            layers.push(LayerWeights {
                ln1_gain: store.add(ln("ln1.gain"), Tensor2D::filled(1, d, 1.0), true),
                ln1_bias: store.add(ln("ln1.bias"), Tensor2D::zeros(1, d), true),
                wq: store.add(ln("attn.wq"), gaussian(rng, d, d, fan(d)), true),
                wk: store.add(ln("attn.wk"), gaussian(rng, d, d, fan(d)), true),
                wv: store.add(ln("attn.wv"), gaussian(rng, d, d, fan(d)), true),
                wo: store.add(ln("attn.wo"), gaussian(rng, d, d, fan(d)), true),
                ln2_gain: store.add(ln("ln2.gain"), Tensor2D::filled(1, d, 1.0), true),
                ln2_bias: store.add(ln("ln2.bias"), Tensor2D::zeros(1, d), true),
                ff1: store.add(ln("ff.w1"), gaussian(rng, d, cfg.ff_dim, fan(d)), true),
                ff1_bias: store.add(ln("ff.b1"), Tensor2D::zeros(1, cfg.ff_dim), true),
                ff2: store.add(ln("ff.w2"), gaussian(rng, cfg.ff_dim, d, fan(cfg.ff_dim)), true),
                ff2_bias: store.add(ln("ff.b2"), Tensor2D::zeros(1, d), true),
            });
        }
        let base = EncoderBase {
            layers,
            final_gain: store.add(name("final_ln.gain"), Tensor2D::filled(1, d, 1.0), true),
            final_bias: store.add(name("final_ln.bias"), Tensor2D::zeros(1, d), true),
            heads: cfg.heads,
            d_model: d,
            ln_eps: cfg.ln_eps,
        };
        let cls = store.add(name("cls"), gaussian(rng, 1, d, 0.02), true);
        let cmpt = if with_cmpt {
            let noise = gaussian(rng, 1, d, cfg.cmpt_init_sigma);
            let init = match cfg.cmpt_init {
                CmptInit::FromCls => store.value(cls).add(&noise)?,
                CmptInit::Zeros => noise,
            };
            Some(store.add(name("cmpt"), init, true))
        } else {
            None
        };
        let mut enc = Self {
            modality,
            embedder: EmbedderParams {
                patch_size: input.patch_size,
                projection,
                positional,
            },
            specials: SpecialTokens { cls, cmpt },
            base,
            adapters: Vec::new(),
            isolate_cls_from_cmpt: cfg.isolate_cls_from_cmpt,
        };
        if with_lora {
            enc.attach_lora(store, &cfg.lora, rng)?;
        }
        Ok(enc)
    }

    /// Adds one adapter per query/key/value/output projection of every layer;
    /// `down ~ N(0, 0.02²)`, `up = 0`.
    pub fn attach_lora(&mut self, store: &mut ParamStore, lora: &LoraConfig, rng: &mut Stream) -> Result<()> {
        if lora.rank == 0 {
            return Err(invalid("attach_lora", "rank must be at least 1"));
        }
        let d = self.base.d_model;
        let pre = self.modality.name();
        for l in 0..self.base.layers.len() {
            for target in LoraTarget::ALL {
                let tag = format!("{pre}.layer{l}.lora.{}", target.short());
                let down = store.add(format!("{tag}.down"), gaussian(rng, d, lora.rank, 0.02), true);
                let up = store.add(format!("{tag}.up"), Tensor2D::zeros(lora.rank, d), true);
                self.adapters.push(LoraAdapter {
                    down,
                    up,
                    rank: lora.rank,
                    alpha: lora.alpha,
                    dropout_p: lora.dropout,
                    target,
                    layer: l,
                });
            }
        }
        Ok(())
    }

    /// Base, embedder and class token ids: everything frozen in the proxy stage.
    pub fn frozen_ids(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![
            self.embedder.projection,
            self.embedder.positional,
            self.specials.cls,
            self.base.final_gain,
            self.base.final_bias,
        ];
        for l in &self.base.layers {
            ids.extend([
                l.ln1_gain, l.ln1_bias, l.wq, l.wk, l.wv, l.wo, l.ln2_gain, l.ln2_bias, l.ff1,
                l.ff1_bias, l.ff2, l.ff2_bias,
            ]);
        }
        ids
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.adapters.iter().flat_map(|a| [a.down, a.up]).collect()
    }

    /// Embeds, assembles and encodes one raw input.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        raw: &[f64],
        use_adapters: bool,
        train_rng: Option<&mut Stream>,
    ) -> Result<EncodedSequence> {
        let content = embed(tape, store, raw, &self.embedder)?;
        let seq = assemble(tape, store, content, &self.specials)?;
        let adapters = (use_adapters && !self.adapters.is_empty()).then_some(self.adapters.as_slice());
        encode(
            tape,
            store,
            &seq,
            &self.base,
            adapters,
            self.isolate_cls_from_cmpt,
            train_rng,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 4,
            heads: 2,
            layers: 1,
            ff_dim: 8,
            ..EncoderConfig::default()
        }
    }

    fn build(with_cmpt: bool, with_lora: bool) -> (ParamStore, ModalityEncoder) {
        let mut store = ParamStore::new();
        let mut rng = stream(1, "test", &[]);
        let enc = ModalityEncoder::build(
            &mut store,
            Modality::M1,
            InputShape {
                raw_dim: 8,
                patch_size: 2,
            },
            &small_cfg(),
            with_cmpt,
            with_lora,
            &mut rng,
        )
        .unwrap();
        (store, enc)
    }

    #[test]
    fn embed_shapes() {
        let (store, enc) = build(true, false);
        let mut t = Tape::new();
        let raw = [0.5; 8];
        let a = embed(&mut t, &store, &raw, &enc.embedder).unwrap();
        assert_eq!(t.value(a).shape(), (4, 4));
        let b = embed(&mut t, &store, &raw, &enc.embedder).unwrap();
        assert_eq!(t.value(a), t.value(b));
        assert!(embed(&mut t, &store, &[0.0; 7], &enc.embedder).is_err());
        assert!(embed(&mut t, &store, &[0.0; 10], &enc.embedder).is_err());
    }

    #[test]
    fn embed_zero_input_zero_positional() {
        let (mut store, enc) = build(false, false);
        *store.value_mut(enc.embedder.positional) = Tensor2D::zeros(4, 4);
        let mut t = Tape::new();
        let a = embed(&mut t, &store, &[0.0; 8], &enc.embedder).unwrap();
        assert!(t.value(a).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assemble_slot_order() {
        let (store, enc) = build(true, false);
        let mut t = Tape::new();
        let content = t.constant(Tensor2D::filled(2, 4, 3.0)).unwrap();
        let seq = assemble(&mut t, &store, content, &enc.specials).unwrap();
        let v = t.value(seq.tokens);
        assert_eq!(v.shape(), (4, 4));
        assert_eq!(v.row(0), store.value(enc.specials.cmpt.unwrap()).data());
        assert_eq!(v.row(1), store.value(enc.specials.cls).data());
        assert_eq!(v.row(2), &[3.0; 4]);
        assert_eq!(seq.slots, SlotMap { cmpt: Some(0), cls: 1, content_start: 2 });

        let empty = t.constant(Tensor2D::zeros(0, 4)).unwrap();
        let seq = assemble(&mut t, &store, empty, &enc.specials).unwrap();
        assert_eq!(t.value(seq.tokens).rows(), 2);

        let wrong = t.constant(Tensor2D::zeros(2, 3)).unwrap();
        assert!(assemble(&mut t, &store, wrong, &enc.specials).is_err());
    }

    fn hand_adapter(store: &mut ParamStore, alpha: f64) -> (ParamId, LoraAdapter) {
        let w = store.add("w", Tensor2D::identity(2), false);
        let down = store.add("down", Tensor2D::from_vec(2, 1, alloc::vec![1.0, 0.0]).unwrap(), true);
        let up = store.add("up", Tensor2D::row_vector(&[0.0, 1.0]), true);
        (
            w,
            LoraAdapter {
                down,
                up,
                rank: 1,
                alpha,
                dropout_p: 0.1,
                target: LoraTarget::Query,
                layer: 0,
            },
        )
    }

    #[test]
    fn lora_hand_arithmetic() {
        let mut store = ParamStore::new();
        let (w, ad) = hand_adapter(&mut store, 1.0);
        let mut t = Tape::new();
        let x = t.constant(Tensor2D::row_vector(&[2.0, 3.0])).unwrap();
        let y = lora_apply(&mut t, &store, x, w, Some(&ad), None).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 5.0]);

        let ad2 = LoraAdapter { alpha: 2.0, ..ad.clone() };
        let y2 = lora_apply(&mut t, &store, x, w, Some(&ad2), None).unwrap();
        assert_eq!(t.value(y2).data(), &[2.0, 7.0]);

        let ad0 = LoraAdapter { rank: 0, ..ad };
        assert!(lora_apply(&mut t, &store, x, w, Some(&ad0), None).is_err());
    }

    #[test]
    fn lora_zero_up_is_exact_identity() {
        let (store, enc) = build(false, true);
        let mut t = Tape::new();
        let mut rng = stream(2, "x", &[]);
        let x = t.constant(gaussian(&mut rng, 3, 4, 1.0)).unwrap();
        let w = enc.base.layers[0].wq;
        let wv = t.param(&store, w).unwrap();
        let plain = t.matmul(x, wv).unwrap();
        let ad = &enc.adapters[0];
        let y = lora_apply(&mut t, &store, x, w, Some(ad), Some(&mut rng)).unwrap();
        assert_eq!(t.value(y), t.value(plain));
    }

    #[test]
    fn encode_preserves_shape_and_zero_init_identity() {
        let (store, enc) = build(true, true);
        let raw = [0.3, -0.1, 0.7, 0.2, -0.5, 0.9, 0.0, 1.1];
        let mut t = Tape::new();
        let with = enc.forward(&mut t, &store, &raw, true, None).unwrap();
        let without = enc.forward(&mut t, &store, &raw, false, None).unwrap();
        assert_eq!(t.value(with.tokens).shape(), (6, 4));
        assert_eq!(t.value(with.tokens), t.value(without.tokens));
        let again = enc.forward(&mut t, &store, &raw, true, None).unwrap();
        assert_eq!(t.value(with.tokens), t.value(again.tokens));
    }

    #[test]
    fn encode_requires_every_adapter() {
        let (store, enc) = build(true, true);
        let mut t = Tape::new();
        let content = embed(&mut t, &store, &[0.0; 8], &enc.embedder).unwrap();
        let seq = assemble(&mut t, &store, content, &enc.specials).unwrap();
        let partial = &enc.adapters[..3];
        let r = encode(&mut t, &store, &seq, &enc.base, Some(partial), false, None);
        assert!(matches!(r, Err(Error::MissingAdapter(_))));
    }

    #[test]
    fn extract_reads_slots() {
        let (store, enc) = build(true, false);
        let mut t = Tape::new();
        let out = enc.forward(&mut t, &store, &[0.1; 8], false, None).unwrap();
        let cls = extract(&mut t, &out, Slot::Cls).unwrap();
        let cmpt = extract(&mut t, &out, Slot::Cmpt).unwrap();
        assert_eq!(t.value(cls).data(), t.value(out.tokens).row(1));
        assert_eq!(t.value(cmpt).data(), t.value(out.tokens).row(0));
        assert!(!t.requires_grad(cls) || store.is_trainable(enc.specials.cls));

        let (store, enc) = build(false, false);
        let out = enc.forward(&mut t, &store, &[0.1; 8], false, None).unwrap();
        assert!(extract(&mut t, &out, Slot::Cmpt).is_err());
    }

    #[test]
    fn isolated_cls_ignores_cmpt() {
        let (mut store, mut enc) = build(true, false);
        enc.isolate_cls_from_cmpt = true;
        let raw = [0.2; 8];
        let mut t = Tape::new();
        let a = enc.forward(&mut t, &store, &raw, false, None).unwrap();
        let cls_a = t.value(a.tokens).row(1).to_vec();
        let cmpt = enc.specials.cmpt.unwrap();
        *store.value_mut(cmpt) = Tensor2D::filled(1, 4, 5.0);
        let mut t2 = Tape::new();
        let b = enc.forward(&mut t2, &store, &raw, false, None).unwrap();
        let cls_b = t2.value(b.tokens).row(1);
        for (x, y) in cls_a.iter().zip(cls_b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
