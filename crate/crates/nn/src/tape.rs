//! Reverse-mode automatic differentiation over an append-only tape.

use std::collections::HashMap;

use rand::Rng;

use crate::params::{Grads, ParamId, ParamStore};
use crate::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    SumAll(Var),
    MeanRows(Var),
    Mse { pred: Var, target: Tensor, mask: Tensor, count: f64 },
    Mae { pred: Var, target: Tensor },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    Nll { probs: Var, targets: Vec<usize> },
    GroupSumCols(Var, Vec<usize>),
    Dropout(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Batch-norm statistics observed in a training-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by forward pass");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is wanted (used by gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.params.insert(id, v);
        v
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.binary(a, b, v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, r) = (self.value(a), self.value(b));
        assert_eq!(r.shape(), [1, x.cols()], "add_row shape mismatch");
        let mut v = x.clone();
        for i in 0..v.rows() {
            for (o, y) in v.row_mut(i).iter_mut().zip(r.data()) {
                *o += y;
            }
        }
        self.binary(a, b, v, Op::AddRow(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `1 × n` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (x, r) = (self.value(a), self.value(b));
        assert_eq!(r.shape(), [1, x.cols()], "mul_row shape mismatch");
        let mut v = x.clone();
        for i in 0..v.rows() {
            for (o, y) in v.row_mut(i).iter_mut().zip(r.data()) {
                *o *= y;
            }
        }
        self.binary(a, b, v, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.unary(a, v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.unary(a, v, Op::Softplus(a))
    }

    /// Row-wise softmax. Columns with `mask[c] == false` get probability 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let v = softmax_rows(self.value(a), mask);
        self.unary(a, v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = affine_rows(&xhat, self.value(gamma), self.value(beta));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Batch normalization over rows using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mean: Vec<f64> = xv.sum_rows().data().iter().map(|s| s / rows as f64).collect();
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for ((v, x), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *v += (x - m).powi(2);
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for r in 0..rows {
            for ((o, m), is) in xhat.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                *o = (*o - m) * is;
            }
        }
        let v = affine_rows(&xhat, self.value(gamma), self.value(beta));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = self.push(v, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, rg);
        (out, BatchStats { mean, var })
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes row `i` of the output.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Tensor::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).copy_from_slice(t.row(id));
        }
        self.unary(table, v, Op::GatherRows(table, ids.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                v.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols.max(1);
        let v = Tensor::new(rows, cols, data).expect("consistent shape");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(x.rows(), len);
        for r in 0..x.rows() {
            v.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.unary(a, v, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let data = x.data()[start * x.cols()..(start + len) * x.cols()].to_vec();
        let v = Tensor::new(len, x.cols(), data).expect("consistent shape");
        self.unary(a, v, Op::SliceRows(a, start))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshape(rows, cols).expect("reshape keeps size");
        self.unary(a, v, Op::Reshape(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::SumAll(a))
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.sum_rows().scale(1.0 / x.rows() as f64);
        self.unary(a, v, Op::MeanRows(a))
    }

    /// Mean squared error over entries where `mask` is 1. Returns 0 when the mask is empty.
    pub fn mse(&mut self, pred: Var, target: &Tensor, mask: Option<&Tensor>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse shape mismatch");
        let mask = mask.cloned().unwrap_or_else(|| Tensor::full(p.rows(), p.cols(), 1.0));
        let count = mask.sum();
        let sse: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .zip(mask.data())
            .map(|((a, b), m)| m * (a - b).powi(2))
            .sum();
        let v = Tensor::scalar(if count > 0.0 { sse / count } else { 0.0 });
        let op = Op::Mse {
            pred,
            target: target.clone(),
            mask,
            count,
        };
        self.unary(pred, v, op)
    }

    /// Mean absolute error against a fixed target.
    pub fn mae(&mut self, pred: Var, target: &Tensor) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mae shape mismatch");
        let n = p.len().max(1) as f64;
        let v = Tensor::scalar(p.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n);
        self.unary(pred, v, Op::Mae { pred, target: target.clone() })
    }

    /// Mean softmax cross-entropy of `logits` (`B × C`) against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let probs = softmax_rows(self.value(logits), None);
        assert_eq!(probs.rows(), targets.len(), "cross_entropy batch mismatch");
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -log_softmax_at(self.value(logits).row(i), t))
            .sum::<f64>()
            / targets.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.unary(logits, Tensor::scalar(loss), op)
    }

    /// Mean negative log-likelihood of probabilities (`B × C`) at class ids.
    pub fn nll(&mut self, probs: Var, targets: &[usize]) -> Var {
        let p = self.value(probs);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -p.get(i, t).max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / targets.len() as f64;
        self.unary(probs, Tensor::scalar(loss), Op::Nll { probs, targets: targets.to_vec() })
    }

    /// Output column `g` is the sum, in index order, of input columns `j` with
    /// `group_of[j] == g`.
    pub fn group_sum_cols(&mut self, a: Var, group_of: &[usize], groups: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols(), group_of.len(), "group_sum_cols width mismatch");
        let mut v = Tensor::zeros(x.rows(), groups);
        for r in 0..x.rows() {
            for (j, &g) in group_of.iter().enumerate() {
                let cur = v.get(r, g);
                v.set(r, g, cur + x.get(r, j));
            }
        }
        self.unary(a, v, Op::GroupSumCols(a, group_of.to_vec()))
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return a;
        }
        let x = self.value(a);
        let keep = 1.0 - p;
        let mask = Tensor::new(
            x.rows(),
            x.cols(),
            (0..x.len()).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect(),
        )
        .expect("shape matches");
        let v = x.zip_map(&mask, |a, m| a * m);
        self.unary(a, v, Op::Dropout(a, mask))
    }

    /// Back-propagates from the `1 × 1` value `loss`.
    pub fn backward(&self, loss: Var) -> NodeGrads {
        assert_eq!(self.value(loss).shape(), [1, 1], "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        NodeGrads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul_t(val(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, val(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul(val(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.t_matmul(val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                self.acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.sum_rows());
            }
            Op::MulRow(a, b) => {
                let (x, r) = (val(*a), val(*b));
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (o, y) in ga.row_mut(i).iter_mut().zip(r.data()) {
                            *o *= y;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.zip_map(x, |p, q| p * q).sum_rows());
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g.scale(*k)),
            Op::Relu(a) => {
                self.acc(grads, *a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y)));
            }
            Op::Tanh(a) => {
                self.acc(grads, *a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y)));
            }
            Op::Softplus(a) => {
                self.acc(grads, *a, g.zip_map(val(*a), |d, x| d * sigmoid(x)));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(d, p)| d * p).sum();
                    for ((o, d), p) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = p * (d - dot);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gm = val(*gamma);
                let n = xhat.cols() as f64;
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let dxh: Vec<f64> = g.row(r).iter().zip(gm.data()).map(|(d, w)| d * w).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, d), h) in dx.row_mut(r).iter_mut().zip(&dxh).zip(xhat.row(r)) {
                            *o = inv_std[r] / n * (n * d - s1 - h * s2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *gamma, g.zip_map(xhat, |d, h| d * h).sum_rows());
                self.acc(grads, *beta, g.sum_rows());
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let gm = val(*gamma);
                let n = xhat.rows() as f64;
                if self.rg(*x) {
                    let mut dxh = g.clone();
                    for r in 0..dxh.rows() {
                        for (o, w) in dxh.row_mut(r).iter_mut().zip(gm.data()) {
                            *o *= w;
                        }
                    }
                    let s1 = dxh.sum_rows();
                    let s2 = dxh.zip_map(xhat, |a, b| a * b).sum_rows();
                    let mut dx = Tensor::zeros(xhat.rows(), xhat.cols());
                    for r in 0..dx.rows() {
                        for c in 0..dx.cols() {
                            let v = inv_std[c] / n * (n * dxh.get(r, c) - s1.get(0, c) - xhat.get(r, c) * s2.get(0, c));
                            dx.set(r, c, v);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *gamma, g.zip_map(xhat, |d, h| d * h).sum_rows());
                self.acc(grads, *beta, g.sum_rows());
            }
            Op::GatherRows(table, ids) => {
                let t = val(*table);
                let mut dt = Tensor::zeros(t.rows(), t.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, d) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += d;
                    }
                }
                self.acc(grads, *table, dt);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if self.rg(*p) {
                        let mut dp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.acc(grads, *p, dp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pv = val(*p);
                    if self.rg(*p) {
                        let data = g.data()[off * g.cols()..(off + pv.rows()) * g.cols()].to_vec();
                        self.acc(grads, *p, Tensor::new(pv.rows(), pv.cols(), data).expect("shape"));
                    }
                    off += pv.rows();
                }
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.acc(grads, *a, dx);
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                dx.data_mut()[start * x.cols()..(start + g.rows()) * x.cols()].copy_from_slice(g.data());
                self.acc(grads, *a, dx);
            }
            Op::Reshape(a) => {
                let x = val(*a);
                self.acc(grads, *a, g.clone().reshape(x.rows(), x.cols()).expect("same size"));
            }
            Op::SumAll(a) => {
                let x = val(*a);
                self.acc(grads, *a, Tensor::full(x.rows(), x.cols(), g.item()));
            }
            Op::MeanRows(a) => {
                let x = val(*a);
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (o, d) in dx.row_mut(r).iter_mut().zip(g.data()) {
                        *o = d / x.rows() as f64;
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::Mae { pred, target } => {
                let k = g.item() / val(*pred).len().max(1) as f64;
                let dp = val(*pred).zip_map(target, |a, b| if a > b { k } else if a < b { -k } else { 0.0 });
                self.acc(grads, *pred, dp);
            }
            Op::Mse { pred, target, mask, count } => {
                if *count > 0.0 {
                    let k = 2.0 * g.item() / count;
                    let p = val(*pred);
                    let mut dp = p.zip_map(target, |a, b| k * (a - b));
                    for (d, m) in dp.data_mut().iter_mut().zip(mask.data()) {
                        *d *= m;
                    }
                    self.acc(grads, *pred, dp);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = g.item() / targets.len() as f64;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let cur = d.get(i, t);
                    d.set(i, t, cur - 1.0);
                }
                self.acc(grads, *logits, d.scale(k));
            }
            Op::Nll { probs, targets } => {
                let p = val(*probs);
                let k = g.item() / targets.len() as f64;
                let mut d = Tensor::zeros(p.rows(), p.cols());
                for (i, &t) in targets.iter().enumerate() {
                    d.set(i, t, -k / p.get(i, t).max(f64::MIN_POSITIVE));
                }
                self.acc(grads, *probs, d);
            }
            Op::GroupSumCols(a, group_of) => {
                let x = val(*a);
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (j, &gi) in group_of.iter().enumerate() {
                        dx.set(r, j, g.get(r, gi));
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::Dropout(a, mask) => self.acc(grads, *a, g.zip_map(mask, |d, m| d * m)),
        }
    }

    /// Collects gradients of bound trainable parameters.
    pub fn param_grads(&self, node_grads: &NodeGrads, n_params: usize) -> Grads {
        let mut out = Grads::new(n_params);
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, node_grads.grads[i].as_ref()) {
                out.add(*id, g);
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row[t] - lse
}

/// Row-wise softmax with an optional per-column key mask.
pub fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let keep = |c: usize| mask.is_none_or(|m| m[c]);
        let m = (0..row.len()).filter(|&c| keep(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(r);
        for c in 0..row.len() {
            o[c] = if keep(c) { (row[c] - m).exp() } else { 0.0 };
        }
        let s: f64 = o.iter().sum();
        if s > 0.0 {
            for v in o.iter_mut() {
                *v /= s;
            }
        }
    }
    out
}

fn affine_rows(xhat: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    assert_eq!(gamma.shape(), [1, xhat.cols()], "normalization gamma shape");
    assert_eq!(beta.shape(), [1, xhat.cols()], "normalization beta shape");
    let mut v = xhat.clone();
    for r in 0..v.rows() {
        for ((o, w), b) in v.row_mut(r).iter_mut().zip(gamma.data()).zip(beta.data()) {
            *o = *o * w + b;
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_gradient_is_zero_below_zero() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row_vector(vec![-2.0, -0.5, 0.5, 3.0]));
        let y = t.relu(x);
        let s = t.sum_all(y);
        let g = t.backward(s);
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let x = Tensor::row_vector(vec![1.0, 2.0, 3.0]);
        let p = softmax_rows(&x, Some(&[true, false, true]));
        assert_eq!(p.get(0, 1), 0.0);
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_cross_entropy_is_ln_k() {
        let mut t = Tape::new();
        let logits = t.input(Tensor::zeros(3, 7));
        let l = t.cross_entropy(logits, &[0, 3, 6]);
        assert!((t.value(l).item() - 7f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(4, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 45.0]).unwrap());
        let gamma = t.constant(Tensor::full(1, 2, 1.0));
        let beta = t.constant(Tensor::zeros(1, 2));
        let (y, stats) = t.batch_norm_train(x, gamma, beta, 1e-12);
        let y = t.value(y);
        for c in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| y.get(r, c)).collect();
            let m = col.iter().sum::<f64>() / 4.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-5);
        }
        assert_eq!(stats.mean, vec![2.5, 26.25]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(1, 1, 2.0), false);
        let b = store.add("b", Tensor::full(1, 1, 1.0), true);
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(3.0));
        let wv = t.param(&store, w);
        let bv = t.param(&store, b);
        let y = t.matmul(x, wv);
        let y = t.add(y, bv);
        let g = t.backward(y);
        let pg = t.param_grads(&g, store.len());
        assert!(pg.get(w).is_none());
        assert_eq!(pg.get(b).unwrap().item(), 1.0);
    }
}
