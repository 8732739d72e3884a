//! Tape-based reverse-mode automatic differentiation over [`Tensor2D`].
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value and whatever it needs for the backward rule. Nodes are only
//! ever appended, so the tape is a DAG in execution order and
//! [`Tape::backward`] visits each node once, in reverse.
//!
//! Parameters live in a [`ParamStore`] and enter a tape through
//! [`Tape::param`]; gradients of trainable parameters are accumulated back
//! into the store. Frozen parameters and constants never receive gradients,
//! and no gradient work is done for subgraphs that depend on neither.
//!
//! Every forward op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] naming the op.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor2D;

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor2D,
    /// Whether the optimizer may touch this tensor (`requires_grad`).
    pub trainable: bool,
    grad: Option<Tensor2D>,
}

impl Param {
    pub fn grad(&self) -> Option<&Tensor2D> {
        self.grad.as_ref()
    }
}

/// Owns every named tensor of a model, each tagged trainable or frozen.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2D, trainable: bool) -> ParamId {
        let grad = trainable.then(|| Tensor2D::zeros(value.rows(), value.cols()));
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2D {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2D {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor2D> {
        self.params[id.0].grad.as_ref()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        p.grad = trainable.then(|| Tensor2D::zeros(p.value.rows(), p.value.cols()));
    }

    pub fn freeze_all(&mut self) {
        for i in 0..self.params.len() {
            self.set_trainable(ParamId(i), false);
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.data().len())
            .sum()
    }

    /// Drops every parameter registered after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.params.truncate(len);
    }

    /// Squared L2 norm of all trainable gradients together.
    pub fn grad_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .filter_map(|p| p.grad.as_ref())
            .map(Tensor2D::norm_sq)
            .sum()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Combined checksum of every frozen tensor, in store order.
    pub fn frozen_checksum(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| !p.trainable)
            .fold(0u64, |h, p| crate::tensor::fnv_mix(h, p.value.checksum()))
    }

    /// Combined checksum of every tensor, in store order.
    pub fn checksum(&self) -> u64 {
        self.params
            .iter()
            .fold(0u64, |h, p| crate::tensor::fnv_mix(h, p.value.checksum()))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor2D,
        inv_std: Vec<f64>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Tensor2D,
    },
    BceLogits {
        logits: Var,
        targets: Tensor2D,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor2D,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact-erf GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

/// Derivative of [`gelu`]: `Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = INV_SQRT_2PI * libm::exp(-0.5 * x * x);
    cdf + x * pdf
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes, keeping allocations.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor2D, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; never receives gradient.
    pub fn constant(&mut self, value: Tensor2D) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A copy of `v` cut off from the graph (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf, false, "detach")
    }

    /// The tape node for a stored parameter; one node per parameter per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(Some(v)) = self.param_vars.get(id.0) {
            return Ok(*v);
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable, "param")?;
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulT(a, b), rg, "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    /// Componentwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg, "scale")
    }

    /// Adds the `1×cols` row `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(shape_err(
                "add_bias",
                format!("bias {}x{} for {}x{}", b.rows(), b.cols(), x.rows(), x.cols()),
            ));
        }
        let mut out = x.clone();
        let cols = x.cols();
        for r in 0..x.rows() {
            for (o, &bv) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddBias(a, bias), rg, "add_bias")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg, "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 || x.cols() == 0 {
            return Err(Error::Empty { op: "softmax_rows" });
        }
        let out = softmax_rows(x);
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg, "softmax_rows")
    }

    /// Per-row normalization to zero mean and unit variance, then `·gain + bias`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(invalid("layer_norm_rows", "eps must be positive"));
        }
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, cols) || b.shape() != (1, cols) {
            return Err(shape_err(
                "layer_norm_rows",
                format!("gain/bias must be 1x{cols}"),
            ));
        }
        if cols == 0 {
            return Err(Error::Empty { op: "layer_norm_rows" });
        }
        let n = cols as f64;
        let mut xhat = Tensor2D::zeros(rows, cols);
        let mut out = Tensor2D::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().fold(0.0, |acc, &v| acc + v) / n;
            let var = row.iter().fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm_rows",
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg, "slice_cols")
    }

    /// Stacks inputs vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty { op: "concat_rows" })?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("{} columns vs {cols}", v.cols()),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor2D::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    /// Places inputs side by side; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty { op: "concat_cols" })?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err(
                    "concat_cols",
                    format!("{} rows vs {rows}", v.rows()),
                ));
            }
            cols += v.cols();
        }
        let mut out = Tensor2D::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for r in 0..rows {
                out.data_mut()[r * cols + offset..r * cols + offset + v.cols()]
                    .copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor2D::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.data().is_empty() {
            return Err(Error::Empty { op: "mean" });
        }
        let out = Tensor2D::scalar(v.sum() / v.data().len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg, "mean")
    }

    /// Mean over all coordinates of `(a − b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b)).map_err(|_| {
            shape_err(
                "mse",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            )
        })?;
        if d.data().is_empty() {
            return Err(Error::Empty { op: "mse" });
        }
        let out = Tensor2D::scalar(d.norm_sq() / d.data().len() as f64);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mse(a, b), rg, "mse")
    }

    /// Softmax cross-entropy of a `1×C` logit row against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != 1 || z.cols() == 0 {
            return Err(shape_err("cross_entropy", "logits must be 1xC"));
        }
        if target >= z.cols() {
            return Err(invalid(
                "cross_entropy",
                format!("class {target} out of range for {} classes", z.cols()),
            ));
        }
        let probs = softmax_rows(z);
        let row = z.row(0);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + libm::log(row.iter().fold(0.0, |acc, &v| acc + libm::exp(v - max)));
        let out = Tensor2D::scalar(lse - row[target]);
        let rg = self.rg(logits);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Mean sigmoid binary cross-entropy over the slots of a `1×C` logit row.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != 1 || z.cols() != targets.len() || targets.is_empty() {
            return Err(shape_err(
                "bce_with_logits",
                format!("logits {:?} for {} targets", z.shape(), targets.len()),
            ));
        }
        let mut total = 0.0;
        for (&x, &y) in z.row(0).iter().zip(targets) {
            total += x.max(0.0) - x * y + libm::log1p(libm::exp(-libm::fabs(x)));
        }
        let out = Tensor2D::scalar(total / targets.len() as f64);
        let rg = self.rg(logits);
        self.push(
            out,
            Op::BceLogits {
                logits,
                targets: Tensor2D::row_vector(targets),
            },
            rg,
            "bce_with_logits",
        )
    }

    /// Propagates d`loss` back through the tape, adding gradients of every
    /// trainable parameter into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(shape_err(
                "backward",
                format!("loss must be 1x1, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor2D>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2D::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, g, &mut grads, store)?;
        }
        for id in store.trainable_ids() {
            if let Some(g) = store.grad(id) {
                g.check_finite("backward")?;
            }
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Tensor2D,
        grads: &mut [Option<Tensor2D>],
        store: &mut ParamStore,
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor2D| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                if let Some(buf) = store.params[id.0].grad.as_mut() {
                    buf.add_assign(&g);
                }
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_t(val(*b))?);
                }
                if self.rg(*b) {
                    acc(*b, val(*a).t_matmul(&g)?);
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul(val(*b))?);
                }
                if self.rg(*b) {
                    acc(*b, g.t_matmul(val(*a))?);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    acc(*b, g.scale(-1.0));
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(val(*b), "mul", |x, y| x * y)?);
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(val(*a), "mul", |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddBias(a, bias) => {
                if self.rg(*bias) {
                    acc(*bias, column_sums(&g));
                }
                acc(*a, g);
            }
            Op::Gelu(a) => acc(*a, g.zip_map(val(*a), "gelu", |gy, x| gy * gelu_grad(x))?),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(val(*a), "relu", |gy, x| if x > 0.0 { gy } else { 0.0 })?,
            ),
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut dx = Tensor2D::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = crate::tensor::dot(yr, gr);
                    for c in 0..cols {
                        dx.set(r, c, yr[c] * (gr[c] - inner));
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.rg(*bias) {
                    acc(*bias, column_sums(&g));
                }
                if self.rg(*gain) {
                    let prod = g.zip_map(xhat, "layer_norm_rows", |a, b| a * b)?;
                    acc(*gain, column_sums(&prod));
                }
                if self.rg(*x) {
                    let gv = val(*gain).data();
                    let (rows, cols) = g.shape();
                    let n = cols as f64;
                    let mut dx = Tensor2D::zeros(rows, cols);
                    for r in 0..rows {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            dx.set(r, c, inv_std[r] * (d - mean_d - hr[c] * mean_dh));
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::SliceRows(a, start) => {
                let src = val(*a);
                let mut dx = Tensor2D::zeros(src.rows(), src.cols());
                let cols = src.cols();
                dx.data_mut()[start * cols..start * cols + g.data().len()].copy_from_slice(g.data());
                acc(*a, dx);
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let mut dx = Tensor2D::zeros(src.rows(), src.cols());
                let (cols, w) = (src.cols(), g.cols());
                for r in 0..g.rows() {
                    dx.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                acc(*a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if self.rg(p) {
                        acc(p, g.slice_rows(offset, rows)?);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if self.rg(p) {
                        acc(p, g.slice_cols(offset, cols)?);
                    }
                    offset += cols;
                }
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Tensor2D::filled(r, c, g.item()?));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Tensor2D::filled(r, c, g.item()? / (r * c) as f64));
            }
            Op::Mse(a, b) => {
                let gy = g.item()?;
                let (va, vb) = (val(*a), val(*b));
                let k = 2.0 * gy / va.data().len() as f64;
                let da = va.zip_map(vb, "mse", |x, y| k * (x - y))?;
                if self.rg(*b) {
                    acc(*b, da.scale(-1.0));
                }
                acc(*a, da);
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let gy = g.item()?;
                let mut dz = probs.clone();
                let t = dz.get(0, *target);
                dz.set(0, *target, t - 1.0);
                acc(*logits, dz.scale(gy));
            }
            Op::BceLogits { logits, targets } => {
                let gy = g.item()?;
                let n = targets.cols() as f64;
                let dz = val(*logits).zip_map(targets, "bce_with_logits", |x, y| {
                    gy * (sigmoid(x) - y) / n
                })?;
                acc(*logits, dz);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(x: &Tensor2D) -> Tensor2D {
    let (rows, cols) = x.shape();
    let mut out = Tensor2D::zeros(rows, cols);
    for r in 0..rows {
        let row = x.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = libm::exp(v - max);
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

fn column_sums(g: &Tensor2D) -> Tensor2D {
    let cols = g.cols();
    let mut out = Tensor2D::zeros(1, cols);
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    debug_assert_eq!(out.cols(), cols);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor2D, bool)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, v, t)| s.add(*n, v.clone(), *t))
            .collect();
        (s, ids)
    }

    #[test]
    fn matmul_grad_is_b_transpose() {
        let (mut s, ids) = store_with(&[
            ("a", Tensor2D::row_vector(&[1.0, 2.0]), true),
            ("b", Tensor2D::from_vec(2, 1, vec![3.0, 4.0]).unwrap(), false),
        ]);
        let mut t = Tape::new();
        let a = t.param(&s, ids[0]).unwrap();
        let b = t.param(&s, ids[1]).unwrap();
        let c = t.matmul(a, b).unwrap();
        let l = t.sum(c).unwrap();
        t.backward(l, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).unwrap().data(), &[3.0, 4.0]);
        assert!(s.grad(ids[1]).is_none());
    }

    #[test]
    fn elementwise_values() {
        let mut t = Tape::new();
        let a = t.constant(Tensor2D::row_vector(&[1.0, 2.0])).unwrap();
        let b = t.constant(Tensor2D::row_vector(&[3.0, 4.0])).unwrap();
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).data(), &[4.0, 6.0]);
        let c = t.constant(Tensor2D::row_vector(&[1.0, -1.0])).unwrap();
        let sc = t.scale(c, 0.2).unwrap();
        assert_eq!(t.value(sc).data(), &[0.2, -0.2]);
    }

    #[test]
    fn gelu_slope_at_zero() {
        assert_eq!(gelu_grad(0.0), 0.5);
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut t = Tape::new();
        let a = t.constant(Tensor2D::row_vector(&[0.0, 0.0])).unwrap();
        let s = t.softmax_rows(a).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
        let b = t.constant(Tensor2D::row_vector(&[1000.0, 0.0])).unwrap();
        let s = t.softmax_rows(b).unwrap();
        let v = t.value(s).data();
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1] >= 0.0 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_empty() {
        let mut t = Tape::new();
        let a = t.constant(Tensor2D::zeros(0, 3)).unwrap();
        assert_eq!(t.softmax_rows(a), Err(Error::Empty { op: "softmax_rows" }));
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor2D::filled(1, 2, 1.0)).unwrap();
        let b = t.constant(Tensor2D::zeros(1, 2)).unwrap();
        let x = t.constant(Tensor2D::row_vector(&[1.0, 3.0])).unwrap();
        let y = t.layer_norm_rows(x, g, b, 1e-12).unwrap();
        let v = t.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

        let g3 = t.constant(Tensor2D::filled(1, 3, 1.0)).unwrap();
        let b3 = t.constant(Tensor2D::zeros(1, 3)).unwrap();
        let c = t.constant(Tensor2D::row_vector(&[5.0, 5.0, 5.0])).unwrap();
        let y = t.layer_norm_rows(c, g3, b3, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn square_sum_grad() {
        let (mut s, ids) = store_with(&[("x", Tensor2D::row_vector(&[3.0]), true)]);
        let mut t = Tape::new();
        let x = t.param(&s, ids[0]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq).unwrap();
        t.backward(l, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).unwrap().data(), &[6.0]);
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let (mut s, ids) = store_with(&[
            ("x", Tensor2D::row_vector(&[3.0]), true),
            ("unused", Tensor2D::row_vector(&[1.0, 2.0]), true),
        ]);
        let mut t = Tape::new();
        let x = t.param(&s, ids[0]).unwrap();
        let l = t.sum(x).unwrap();
        t.backward(l, &mut s).unwrap();
        assert_eq!(s.grad(ids[1]).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut s = ParamStore::new();
        let mut t = Tape::new();
        let x = t.constant(Tensor2D::zeros(1, 2)).unwrap();
        assert!(matches!(t.backward(x, &mut s), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_names_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor2D::row_vector(&[1e300])).unwrap();
        assert_eq!(t.mul(a, a), Err(Error::NonFinite { op: "mul" }));
        assert!(t.constant(Tensor2D::row_vector(&[f64::NAN])).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let (mut s, ids) = store_with(&[("x", Tensor2D::row_vector(&[2.0]), true)]);
        let mut t = Tape::new();
        let x = t.param(&s, ids[0]).unwrap();
        let d = t.detach(x).unwrap();
        let l = t.mse(x, d).unwrap();
        let l2 = t.add(l, l).unwrap();
        t.backward(l2, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).unwrap().data(), &[0.0]);
    }

    #[test]
    fn uniform_cross_entropy_is_log_c() {
        let mut t = Tape::new();
        let z = t.constant(Tensor2D::zeros(1, 4)).unwrap();
        let l = t.cross_entropy(z, 3).unwrap();
        assert!((t.value(l).item().unwrap() - libm::log(4.0)).abs() < 1e-15);
        assert!(t.cross_entropy(z, 4).is_err());
    }
}
