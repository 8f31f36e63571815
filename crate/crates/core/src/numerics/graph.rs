//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` simply walks it in reverse.

use std::collections::BTreeMap;

use super::tensor::{axis_split, matmul_into, matmul_nt_into, matmul_tn_into, moments, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RepeatRows(Var),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) => {
                vec![*a, *b]
            }
            Transpose(x)
            | Scale(x, _)
            | Relu(x)
            | Sigmoid(x)
            | Softmax(x, _)
            | RepeatRows(x)
            | MeanRows(x)
            | Sum(x) => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Gather { table, .. } => vec![*table],
            SliceCols { x, .. } => vec![*x],
            ConcatCols(xs) | ConcatRows(xs) => xs.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            MatMul(..) => "matmul",
            MatMulNT(..) => "matmul_nt",
            Transpose(..) => "transpose",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            AddBias(..) => "add_bias",
            Scale(..) => "scale",
            Relu(..) => "relu",
            Sigmoid(..) => "sigmoid",
            Softmax(..) => "softmax",
            LayerNorm { .. } => "layer_norm",
            Gather { .. } => "gather",
            SliceCols { .. } => "slice_cols",
            ConcatCols(..) => "concat_cols",
            ConcatRows(..) => "concat_rows",
            RepeatRows(..) => "repeat_rows",
            MeanRows(..) => "mean_rows",
            Sum(..) => "sum",
            CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    is_param: bool,
}

/// Opaque position in a graph, see [`Graph::mark`].
#[derive(Clone, Copy, Debug)]
pub struct Mark(usize);

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// New graph; non-finite checks follow the build profile
    /// (on with debug assertions, off otherwise).
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            backward_done: false,
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Remembers the current end of the tape.
    pub fn mark(&self) -> Mark {
        Mark(self.nodes.len())
    }

    /// Drops every node recorded after `mark`. Used by decoding loops that
    /// repeatedly evaluate short-lived suffixes over a shared prefix.
    pub fn rewind(&mut self, mark: Mark) {
        self.nodes.truncate(mark.0);
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: Tensor, is_param: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            needs_grad: is_param,
            is_param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            is_param: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_nt inner dimensions differ: {:?} · {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let t = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMulNT(a, b), t)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push(Op::Transpose(x), out)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), out)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), out)
    }

    /// `x[..., d] + bias[d]`, the only broadcast the engine supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.push(Op::AddBias(x, bias), out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.map(x, |v| v * c)?;
        self.push(Op::Scale(x, c), out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v.max(0.0))?;
        self.push(Op::Relu(x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, sigmoid)?;
        self.push(Op::Sigmoid(x), out)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        self.push(Op::Softmax(x, axis), out)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "layer_norm over last axis {d} needs gain/bias of shape [{d}], got {:?} and {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        if d < 2 && eps == 0.0 {
            return Err(Error::DegenerateVariance { dim: d });
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = xt.data().to_vec();
        let mut rstds = Vec::with_capacity(xt.outer_len());
        let mut out = vec![0.0; normed.len()];
        for (row, orow) in normed.chunks_mut(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = moments(row, eps);
            rstds.push(rstd);
            for j in 0..d {
                row[j] = (row[j] - mean) * rstd;
                orow[j] = row[j] * g[j] + b[j];
            }
        }
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd: rstds,
            },
            t,
        )
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::dim("gather with no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::dim(format!(
                    "gather id {id} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            t,
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start >= end || end > c {
            return Err(Error::dim(format!(
                "slice_cols {start}..{end} of {c} columns"
            )));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, w], out)?;
        self.push(Op::SliceCols { x, start }, t)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::dim("concat_cols of nothing"));
        }
        let r = self.value(xs[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (rx, cx) = self.value(x).dims2()?;
            if rx != r {
                return Err(Error::dim(format!("concat_cols row mismatch: {rx} vs {r}")));
            }
            widths.push(cx);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        self.push(Op::ConcatCols(xs.to_vec()), t)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::dim("concat_rows of nothing"));
        }
        let c = self.value(xs[0]).dims2()?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (rx, cx) = self.value(x).dims2()?;
            if cx != c {
                return Err(Error::dim(format!(
                    "concat_rows column mismatch: {cx} vs {c}"
                )));
            }
            rows += rx;
            out.extend_from_slice(self.value(x).data());
        }
        let t = Tensor::new(vec![rows, c], out)?;
        self.push(Op::ConcatRows(xs.to_vec()), t)
    }

    /// Stacks a `[1×d]` row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, d) = self.value(x).dims2()?;
        if r != 1 || n == 0 {
            return Err(Error::dim(format!(
                "repeat_rows needs a [1×d] input and n ≥ 1, got [{r}×{d}], n={n}"
            )));
        }
        let row = self.value(x).data().to_vec();
        let t = Tensor::new(vec![n, d], row.repeat(n))?;
        self.push(Op::RepeatRows(x), t)
    }

    /// Column means: `[n×d] → [1×d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, d) = self.value(x).dims2()?;
        let mut out = vec![0.0; d];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.value(x).row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let t = Tensor::new(vec![1, d], out)?;
        self.push(Op::MeanRows(x), t)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. `None` targets (padding) are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::contract(
                "cross_entropy: every target position is padding",
            ));
        }
        let probs = self.value(logits).softmax(1)?.into_data();
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::dim(format!(
                        "target id {t} out of range for {v} classes"
                    )));
                }
                // log-softmax computed from the logits directly for accuracy
                let row = self.value(logits).row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
            }
        }
        let out = Tensor::scalar(loss / count as f64);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            out,
        )
    }

    /// Reverse pass from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this graph; build a new graph for another pass",
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;

        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(dout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dout);
                continue;
            }
            for (input, g) in self.local_grads(i, &dout)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.is_param {
                continue;
            }
            let data = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; node.value.numel()]);
            out.insert(Var(i), Tensor::new(node.value.shape().to_vec(), data)?);
        }
        Ok(Gradients { grads: out })
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `dout`.
    fn local_grads(&self, i: usize, dout: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, nn) = self.value(*b).dims2()?;
                let mut da = vec![0.0; m * k];
                matmul_nt_into(dout, val(*b), &mut da, m, nn, k);
                let mut db = vec![0.0; k * nn];
                matmul_tn_into(val(*a), dout, &mut db, m, k, nn);
                vec![(*a, da), (*b, db)]
            }
            Op::MatMulNT(a, b) => {
                // c = a · bᵀ ; da = dc · b ; db = dcᵀ · a
                let (m, k) = self.value(*a).dims2()?;
                let (nn, _) = self.value(*b).dims2()?;
                let mut da = vec![0.0; m * k];
                matmul_into(dout, val(*b), &mut da, m, nn, k);
                let mut db = vec![0.0; nn * k];
                matmul_tn_into(dout, val(*a), &mut db, m, nn, k);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2()?;
                let mut dx = vec![0.0; r * c];
                for p in 0..r {
                    for q in 0..c {
                        dx[p * c + q] = dout[q * r + p];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Add(a, b) => vec![(*a, dout.to_vec()), (*b, dout.to_vec())],
            Op::Sub(a, b) => vec![(*a, dout.to_vec()), (*b, dout.iter().map(|g| -g).collect())],
            Op::Mul(a, b) => {
                let da = dout.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let db = dout.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::AddBias(x, bias) => {
                let d = self.value(*bias).numel();
                let mut db = vec![0.0; d];
                for row in dout.chunks(d) {
                    for (a, g) in db.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                vec![(*x, dout.to_vec()), (*bias, db)]
            }
            Op::Scale(x, c) => vec![(*x, dout.iter().map(|g| g * c).collect())],
            Op::Relu(x) => {
                let dx = dout
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let dx = dout
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis)?;
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let dot: f64 = (0..n).map(|j| dout[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (dout[idx(j)] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let g = val(*gain);
                let d = g.len();
                let mut dx = vec![0.0; normed.len()];
                let mut dg = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (r, ((xh, go), dxr)) in normed
                    .chunks(d)
                    .zip(dout.chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        dg[j] += go[j] * xh[j];
                        dbias[j] += go[j];
                        let dxh = go[j] * g[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = go[j] * g[j];
                        dxr[j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                vec![(*x, dx), (*gain, dg), (*bias, dbias)]
            }
            Op::Gather { table, ids } => {
                let (rows, d) = self.value(*table).dims2()?;
                let mut dt = vec![0.0; rows * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += dout[i * d + j];
                    }
                }
                vec![(*table, dt)]
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2()?;
                let w = node.value.last_dim();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&dout[i * w..(i + 1) * w]);
                }
                vec![(*x, dx)]
            }
            Op::ConcatCols(xs) => {
                let (r, total) = node.value.dims2()?;
                let mut off = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let w = self.value(x).last_dim();
                    let mut dx = Vec::with_capacity(r * w);
                    for i in 0..r {
                        dx.extend_from_slice(&dout[i * total + off..i * total + off + w]);
                    }
                    off += w;
                    out.push((x, dx));
                }
                out
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let n = self.value(x).numel();
                    out.push((x, dout[off..off + n].to_vec()));
                    off += n;
                }
                out
            }
            Op::RepeatRows(x) => {
                let d = node.value.last_dim();
                let mut dx = vec![0.0; d];
                for row in dout.chunks(d) {
                    for (a, g) in dx.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                vec![(*x, dx)]
            }
            Op::MeanRows(x) => {
                let (r, _) = self.value(*x).dims2()?;
                let dx = dout.repeat(r).iter().map(|g| g / r as f64).collect();
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![dout[0]; self.value(*x).numel()])],
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.value(*logits).last_dim();
                let scale = dout[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..v {
                            dl[i * v + j] = probs[i * v + j] * scale;
                        }
                        dl[i * v + t] -= scale;
                    }
                }
                vec![(*logits, dl)]
            }
        })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradients of every trainable leaf after a backward pass. Leaves that did
/// not contribute to the loss map to zeros.
#[derive(Debug)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecs(g: &Gradients, v: Var) -> Vec<f64> {
        g.get(v).unwrap().data().to_vec()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(vecs(&grads, x), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(vecs(&grads, x), vec![2.0, 4.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let unused = g.param(Tensor::vector(vec![5.0, 6.0, 7.0]).unwrap());
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(vecs(&grads, unused), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0]).unwrap());
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcasting_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(vec![1, 3]).unwrap());
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
        let bias = g.constant(Tensor::zeros(vec![2]).unwrap());
        assert!(g.add_bias(a, bias).is_err());
    }

    #[test]
    fn non_finite_values_are_caught() {
        let mut g = Graph::new().with_finite_checks(true);
        let x = g.constant(Tensor::vector(vec![f64::MAX]).unwrap());
        assert!(matches!(
            g.scale(x, 10.0),
            Err(Error::NonFinite { op: "scale" })
        ));
        let mut g = Graph::new().with_finite_checks(false);
        let x = g.constant(Tensor::vector(vec![f64::MAX]).unwrap());
        assert!(g.scale(x, 10.0).is_ok());
    }

    #[test]
    fn all_padding_targets_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2, 3]).unwrap());
        assert!(matches!(
            g.cross_entropy(x, &[None, None]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2, 4]).unwrap());
        let l = g.cross_entropy(x, &[Some(1), None]).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        let d = vecs(&grads, x);
        assert_eq!(&d[4..], &[0.0; 4]);
        assert!((d[1] + 0.75).abs() < 1e-15);
        assert!((d[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rewind_drops_suffix() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0]).unwrap());
        let m = g.mark();
        g.scale(x, 2.0).unwrap();
        g.scale(x, 3.0).unwrap();
        assert_eq!(g.len(), 3);
        g.rewind(m);
        assert_eq!(g.len(), 1);
    }
}
