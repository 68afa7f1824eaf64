//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and the information its
//! backward rule needs. `backward` walks the tape once in reverse order,
//! which is a reverse topological order because inputs always precede the
//! nodes that consume them.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{matmul, matmul_nt, matmul_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    GatherEntries(Var, Vec<(usize, usize)>),
    SumRows(Var),
    MeanRows(Var),
    SumAll(Var),
    Relu(Var),
    Sigmoid(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LogSumExpRows(Var),
    SoftmaxCrossEntropy(Var, Vec<usize>),
    SegmentCrossEntropy(Var, Vec<usize>),
    Mse(Var, Tensor),
    BceWithLogits(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    inference: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softmax_into(xs: &[f64], out: &mut [f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
    m + s.ln()
}

/// `ln(sum(exp(xs)))` with max subtraction.
pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// A tape that records gradients for trainable parameters.
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape on which nothing requires gradients.
    pub fn inference() -> Self {
        Tape {
            inference: true,
            ..Tape::default()
        }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = !self.inference && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records parameter `id`; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param,
            requires_grad: p.trainable && !self.inference,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a . b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNT(a, b), &[a, b]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch(op, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Adds the `1 x d` row `b` to every row of the `n x d` matrix `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(b));
        if r.rows() != 1 || x.cols() != r.cols() {
            return Err(mismatch("add_row", x, r));
        }
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + r.data()[i % c])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect())
            .expect("same shape");
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Multiplies row `i` of `a` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        if factors.len() != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![factors.len()],
            });
        }
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * factors[i / c.max(1)])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ScaleRows(a, factors), &[a]))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty);
        };
        let n = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != n || !t.is_matrix() {
                return Err(mismatch("concat_cols", self.value(first), t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(n, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start .. start + width` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.value(a);
        if start + width > x.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: x.shape().to_vec(),
                rhs: vec![start, width],
            });
        }
        let mut data = Vec::with_capacity(x.rows() * width);
        for i in 0..x.rows() {
            data.extend_from_slice(&x.row(i)[start..start + width]);
        }
        let out = Tensor::matrix(x.rows(), width, data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    /// Rows `idx[0], idx[1], ...` of `a`. Also serves as embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            if i >= r {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    lhs: x.shape().to_vec(),
                    rhs: vec![i],
                });
            }
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(out, Op::GatherRows(a, idx), &[a]))
    }

    pub fn embedding_lookup(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        self.gather_rows(table, idx)
    }

    /// Output row `idx[i]` accumulates input row `i`; the output has `n` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Vec<usize>, n: usize) -> Result<Var> {
        let x = self.value(a);
        if idx.len() != x.rows() || idx.iter().any(|&i| i >= n) {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![idx.len(), n],
            });
        }
        let c = x.cols();
        let mut out = Tensor::zeros(n, c);
        for (i, &t) in idx.iter().enumerate() {
            let src = x.row(i);
            let dst = &mut out.data_mut()[t * c..(t + 1) * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        Ok(self.push(out, Op::ScatterAddRows(a, idx), &[a]))
    }

    /// The entries `a[r, c]` for each `(r, c)` as a `k x 1` column.
    pub fn gather_entries(&mut self, a: Var, idx: Vec<(usize, usize)>) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(idx.len());
        for &(i, j) in &idx {
            if i >= r || j >= c {
                return Err(Error::ShapeMismatch {
                    op: "gather_entries",
                    lhs: x.shape().to_vec(),
                    rhs: vec![i, j],
                });
            }
            data.push(x.data()[i * c + j]);
        }
        let out = Tensor::matrix(idx.len(), 1, data)?;
        Ok(self.push(out, Op::GatherEntries(a, idx), &[a]))
    }

    /// Column sums, `1 x d`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut out = vec![0.0; c];
        for i in 0..x.rows() {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let out = Tensor::matrix(1, c, out).expect("shape");
        self.push(out, Op::SumRows(a), &[a])
    }

    /// Column means, `1 x d`. Zero rows give a zero row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        if r > 0 {
            out.iter_mut().for_each(|o| *o /= r as f64);
        }
        let out = Tensor::matrix(1, c, out).expect("shape");
        self.push(out, Op::MeanRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())
            .expect("shape");
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| sigmoid(v)).collect())
            .expect("shape");
        self.push(out, Op::Sigmoid(a), &[a])
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = self.value(x).cols();
        for p in [gamma, beta] {
            let t = self.value(p);
            if t.rows() != 1 || t.cols() != c {
                return Err(mismatch("batch_norm_1d", self.value(x), t));
            }
        }
        Ok(c)
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, batch_stats: bool) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let h = (xv.data()[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let xhat = Tensor::matrix(r, c, xhat).expect("shape");
        let out = Tensor::matrix(r, c, out).expect("shape");
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// biased batch mean and variance (for running-statistics updates).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let c = self.check_bn(x, gamma, beta)?;
        let xv = self.value(x);
        let r = xv.rows();
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for (m, v) in mean.iter_mut().zip(xv.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= r.max(1) as f64);
        let mut var = vec![0.0; c];
        for i in 0..r {
            for ((s, v), m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= r.max(1) as f64);
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true);
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let c = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm_1d",
                lhs: vec![c],
                rhs: vec![mean.len(), var.len()],
            });
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, mean, inv_std, false))
    }

    /// Row-wise `ln(sum(exp(row)))`, `n x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|i| logsumexp(x.row(i))).collect();
        let out = Tensor::matrix(x.rows(), 1, data).expect("shape");
        self.push(out, Op::LogSumExpRows(a), &[a])
    }

    /// Per-row cross-entropy `logsumexp(row) - row[target]`, `n x 1`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let x = self.value(logits);
        if targets.len() != x.rows() || targets.iter().any(|&t| t >= x.cols()) {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let data = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| logsumexp(x.row(i)) - x.row(i)[t])
            .collect();
        let out = Tensor::matrix(x.rows(), 1, data)?;
        Ok(self.push(out, Op::SoftmaxCrossEntropy(logits, targets), &[logits]))
    }

    /// Cross-entropy over consecutive segments of a `k x 1` score column.
    /// Segment `g` has length `lens[g]` and its first entry is the positive.
    /// Returns one loss per segment, `G x 1`.
    pub fn segment_cross_entropy(&mut self, scores: Var, lens: Vec<usize>) -> Result<Var> {
        let x = self.value(scores);
        let total: usize = lens.iter().sum();
        if x.cols() != 1 || x.rows() != total || lens.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "segment_cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![total],
            });
        }
        let mut data = Vec::with_capacity(lens.len());
        let mut off = 0;
        for &l in &lens {
            let seg = &x.data()[off..off + l];
            data.push(logsumexp(seg) - seg[0]);
            off += l;
        }
        let out = Tensor::matrix(lens.len(), 1, data)?;
        Ok(self.push(out, Op::SegmentCrossEntropy(scores, lens), &[scores]))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(mismatch("mse", p, &target));
        }
        let n = p.len().max(1) as f64;
        let s: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(pred, target), &[pred]))
    }

    /// Mean binary cross-entropy of logits against 0/1 targets, computed as
    /// `max(x, 0) - x y + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = targets.len().max(1) as f64;
        let s: f64 = x
            .data()
            .iter()
            .zip(&targets)
            .map(|(&v, &y)| v.max(0.0) - v * y + (-v.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::BceWithLogits(logits, targets), &[logits]))
    }

    /// Gradients of the scalar `out` with respect to every parameter in
    /// `store`. Parameters that do not reach `out` get zero gradients.
    pub fn backward(&self, out: Var, store: &ParamStore) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.len() != 1 {
            return Err(Error::NotScalar(ov.shape().to_vec()));
        }
        if !self.requires_grad(out) {
            return Err(Error::DetachedOutput);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::new(ov.shape().to_vec(), vec![1.0])?);

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(node, &g, &mut grads)?;
        }

        let mut out_grads: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::new(p.tensor.shape().to_vec(), vec![0.0; p.tensor.len()]).expect("shape"))
            .collect();
        for (&id, &v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                if id.0 < out_grads.len() {
                    out_grads[id.0] = g;
                }
            }
        }
        Ok(Gradients { grads: out_grads })
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, d: Tensor, nodes: &[Node]| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(d.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data).expect("shape");

        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                if nodes[a.0].requires_grad {
                    acc(*a, matmul_nt(g, val(*b))?, nodes);
                }
                if nodes[b.0].requires_grad {
                    acc(*b, matmul_tn(val(*a), g)?, nodes);
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a b^T: da = g b, db = g^T a
                if nodes[a.0].requires_grad {
                    acc(*a, matmul(g, val(*b))?, nodes);
                }
                if nodes[b.0].requires_grad {
                    acc(*b, matmul_tn(g, val(*a))?, nodes);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), nodes);
                acc(*b, g.clone(), nodes);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), nodes);
                acc(*b, like(*b, g.data().iter().map(|x| -x).collect()), nodes);
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone(), nodes);
                let c = g.cols();
                let mut db = vec![0.0; c];
                for i in 0..g.rows() {
                    for (d, x) in db.iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                acc(*b, like(*b, db), nodes);
            }
            Op::Scale(a, s) => acc(*a, like(*a, g.data().iter().map(|x| x * s).collect()), nodes),
            Op::ScaleRows(a, f) => {
                let c = g.cols().max(1);
                let d = g.data().iter().enumerate().map(|(i, x)| x * f[i / c]).collect();
                acc(*a, like(*a, d), nodes);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if nodes[p.0].requires_grad {
                        let mut d = Vec::with_capacity(g.rows() * w);
                        for i in 0..g.rows() {
                            d.extend_from_slice(&g.row(i)[start..start + w]);
                        }
                        acc(*p, like(*p, d), nodes);
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let (c, w) = (x.cols(), g.cols());
                let mut d = vec![0.0; x.len()];
                for i in 0..g.rows() {
                    d[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                acc(*a, like(*a, d), nodes);
            }
            Op::GatherRows(a, idx) => {
                let c = g.cols();
                let mut d = vec![0.0; val(*a).len()];
                for (i, &r) in idx.iter().enumerate() {
                    for (o, x) in d[r * c..(r + 1) * c].iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(*a, like(*a, d), nodes);
            }
            Op::ScatterAddRows(a, idx) => {
                let c = g.cols();
                let mut d = Vec::with_capacity(idx.len() * c);
                for &t in idx {
                    d.extend_from_slice(g.row(t));
                }
                acc(*a, like(*a, d), nodes);
            }
            Op::GatherEntries(a, idx) => {
                let c = val(*a).cols();
                let mut d = vec![0.0; val(*a).len()];
                for (k, &(i, j)) in idx.iter().enumerate() {
                    d[i * c + j] += g.data()[k];
                }
                acc(*a, like(*a, d), nodes);
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let x = val(*a);
                let scale = match node.op {
                    Op::MeanRows(_) if x.rows() > 0 => 1.0 / x.rows() as f64,
                    _ => 1.0,
                };
                let c = x.cols();
                let d = (0..x.len()).map(|k| g.data()[k % c] * scale).collect();
                acc(*a, like(*a, d), nodes);
            }
            Op::SumAll(a) => acc(*a, like(*a, vec![g.item(); val(*a).len()]), nodes),
            Op::Relu(a) => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(x, gy)| if *x > 0.0 { *gy } else { 0.0 })
                    .collect();
                acc(*a, like(*a, d), nodes);
            }
            Op::Sigmoid(a) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(y, gy)| gy * y * (1.0 - y))
                    .collect();
                acc(*a, like(*a, d), nodes);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (r, c) = (g.rows(), g.cols());
                let gm = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let gy = g.data()[i * c + j];
                        dgamma[j] += gy * xhat.data()[i * c + j];
                        dbeta[j] += gy;
                    }
                }
                if nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; r * c];
                    if *batch_stats {
                        let n = r as f64;
                        // sum(dxhat) and sum(dxhat * xhat) per column
                        let mut s1 = vec![0.0; c];
                        let mut s2 = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                let dxh = g.data()[i * c + j] * gm[j];
                                s1[j] += dxh;
                                s2[j] += dxh * xhat.data()[i * c + j];
                            }
                        }
                        for i in 0..r {
                            for j in 0..c {
                                let dxh = g.data()[i * c + j] * gm[j];
                                dx[i * c + j] = inv_std[j] / n
                                    * (n * dxh - s1[j] - xhat.data()[i * c + j] * s2[j]);
                            }
                        }
                    } else {
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] = g.data()[i * c + j] * gm[j] * inv_std[j];
                            }
                        }
                    }
                    acc(*x, like(*x, dx), nodes);
                }
                acc(*gamma, like(*gamma, dgamma), nodes);
                acc(*beta, like(*beta, dbeta), nodes);
            }
            Op::LogSumExpRows(a) => {
                let x = val(*a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for i in 0..x.rows() {
                    softmax_into(x.row(i), &mut d[i * c..(i + 1) * c]);
                    d[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= g.data()[i]);
                }
                acc(*a, like(*a, d), nodes);
            }
            Op::SoftmaxCrossEntropy(a, targets) => {
                let x = val(*a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &mut d[i * c..(i + 1) * c];
                    softmax_into(x.row(i), row);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= g.data()[i]);
                }
                acc(*a, like(*a, d), nodes);
            }
            Op::SegmentCrossEntropy(a, lens) => {
                let x = val(*a);
                let mut d = vec![0.0; x.len()];
                let mut off = 0;
                for (s, &l) in lens.iter().enumerate() {
                    let seg = &mut d[off..off + l];
                    softmax_into(&x.data()[off..off + l], seg);
                    seg[0] -= 1.0;
                    seg.iter_mut().for_each(|v| *v *= g.data()[s]);
                    off += l;
                }
                acc(*a, like(*a, d), nodes);
            }
            Op::Mse(a, target) => {
                let x = val(*a);
                let n = x.len().max(1) as f64;
                let gy = g.item();
                let d = x
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| 2.0 * (p - t) / n * gy)
                    .collect();
                acc(*a, like(*a, d), nodes);
            }
            Op::BceWithLogits(a, targets) => {
                let x = val(*a);
                let n = targets.len().max(1) as f64;
                let gy = g.item();
                let d = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(v, y)| (sigmoid(*v) - y) / n * gy)
                    .collect();
                acc(*a, like(*a, d), nodes);
            }
        }
        Ok(())
    }
}

/// Gradients aligned with the parameters of the store they were computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn by_name(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .map(|(id, p)| (p.name.clone(), self.grads[id.0].clone()))
            .collect()
    }

    pub fn from_tensors(grads: Vec<Tensor>) -> Self {
        Gradients { grads }
    }
}
