//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive in execution order. Each call returns
//! a [`Var`] handle into the tape; [`Graph::backward`] replays the adjoints in
//! exact reverse order and returns a [`Gradients`] table indexed by `Var`.
//! Graphs are built fresh for every forward pass and dropped afterwards.

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{AfaError, Result};

/// Floor applied inside every log-of-probability expression.
pub const LOG_FLOOR: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Combine(Vec<(Var, f64)>),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRow(Var, usize),
    MeanRows(Var, usize),
    SumAll(Var),
    SoftmaxRows(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BinaryCrossEntropy {
        probs: Var,
        targets: Vec<f64>,
    },
    PlackettLuce {
        weights: Var,
        order: Vec<usize>,
        live: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` for nodes that do not require grad.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AfaError {
    AfaError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_2d() {
        Ok(())
    } else {
        Err(AfaError::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_2d("matmul", ta)?;
        require_2d("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        require_2d("transpose", self.value(a))?;
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        require_2d("add_row", ta)?;
        if tr.shape() != [1, ta.cols()] {
            return Err(shape_err("add_row", ta, tr));
        }
        let n = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % n])
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Adds a fixed tensor (positional encodings, attention masks).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(shape_err("add_const", ta, c));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::AddConst(a), rg))
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() != mask.len() {
            return Err(AfaError::Shape {
                op: "mul_const",
                left: ta.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MulConst(a, mask), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `Σ wᵢ·vᵢ` over same-shaped inputs.
    pub fn combine(&mut self, terms: Vec<(Var, f64)>) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(AfaError::contract("combine needs at least one term"));
        };
        let shape = self.value(first).shape().to_vec();
        let mut data = vec![0.0; self.value(first).numel()];
        for &(v, w) in &terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(shape_err("combine", self.value(first), t));
            }
            for (o, x) in data.iter_mut().zip(t.data()) {
                *o += w * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Combine(terms), rg))
    }

    /// Row lookup `table[ids[i]]` → `len(ids) × d`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let tt = self.value(table);
        require_2d("gather", tt)?;
        let (v, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in &ids {
            if id >= v {
                return Err(AfaError::Index {
                    what: "token id",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::Gather(table, ids), rg))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in &parts {
            let t = self.value(p);
            require_2d("concat_cols", t)?;
            if t.rows() != m {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in &parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(&parts);
        Ok(self.push(Tensor::from_parts(vec![m, total], data), Op::ConcatCols(parts), rg))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let t = self.value(p);
            require_2d("concat_rows", t)?;
            if t.cols() != n {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(&parts);
        Ok(self.push(Tensor::from_parts(vec![rows, n], data), Op::ConcatRows(parts), rg))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let ta = self.value(a);
        require_2d("select_row", ta)?;
        if row >= ta.rows() {
            return Err(AfaError::Index {
                what: "row",
                index: row,
                bound: ta.rows(),
            });
        }
        let out = Tensor::row_vector(ta.row(row).to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SelectRow(a, row), rg))
    }

    /// Mean of the first `count` rows → `1×n`.
    pub fn mean_rows(&mut self, a: Var, count: usize) -> Result<Var> {
        let ta = self.value(a);
        require_2d("mean_rows", ta)?;
        if count == 0 || count > ta.rows() {
            return Err(AfaError::Index {
                what: "row count",
                index: count,
                bound: ta.rows(),
            });
        }
        let n = ta.cols();
        let mut data = vec![0.0; n];
        for r in 0..count {
            for (o, x) in data.iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / count as f64;
        data.iter_mut().for_each(|x| *x *= inv);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::row_vector(data), Op::MeanRows(a, count), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_2d("softmax_rows", ta)?;
        if !ta.is_finite() {
            return Err(AfaError::Input("softmax_rows: non-finite input".into()));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Clamp into `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    /// Per-row layer normalization with `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        require_2d("layer_norm", tx)?;
        let n = tx.cols();
        if tg.shape() != [1, n] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.shape() != [1, n] {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut normalized = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(r);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                normalized.push(xh);
                out.push(xh * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        require_2d("cross_entropy", tl)?;
        let (b, c) = (tl.rows(), tl.cols());
        if labels.len() != b {
            return Err(AfaError::Shape {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(AfaError::Index {
                what: "class label",
                index: bad,
                bound: c,
            });
        }
        let mut probs = tl.data().to_vec();
        for row in probs.chunks_mut(c) {
            softmax_in_place(row);
        }
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[i * c + y].max(LOG_FLOOR).ln())
            .sum::<f64>()
            / b as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: Vec<f64>) -> Result<Var> {
        let tp = self.value(probs);
        if tp.numel() != targets.len() {
            return Err(AfaError::Shape {
                op: "binary_cross_entropy",
                left: tp.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let loss = tp
            .data()
            .iter()
            .zip(&targets)
            .map(|(&p, &t)| -(t * p.max(LOG_FLOOR).ln() + (1.0 - t) * (1.0 - p).max(LOG_FLOOR).ln()))
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(&[probs]);
        Ok(self.push(Tensor::scalar(loss), Op::BinaryCrossEntropy { probs, targets }, rg))
    }

    /// Log-probability of drawing `order` by sequential sampling without
    /// replacement proportional to `weights[..live]` (Plackett–Luce).
    pub fn plackett_luce_log_prob(&mut self, weights: Var, order: &[usize], live: usize) -> Result<Var> {
        let tw = self.value(weights);
        if live == 0 || live > tw.numel() {
            return Err(AfaError::Index {
                what: "live length",
                index: live,
                bound: tw.numel(),
            });
        }
        check_order(order, live)?;
        let value = plackett_luce(&tw.data()[..live], order);
        let rg = self.rg(&[weights]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::PlackettLuce {
                weights,
                order: order.to_vec(),
                live,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that requires grad gets an entry, zero-filled when the loss
    /// does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(AfaError::contract(format!(
                "backward called on non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && g.is_none() {
                *g = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let u = up.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let ga = matmul_nt_raw(u, tb.data(), m, n, k);
                    send(*a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.requires_grad(*b) {
                    let gb = matmul_tn_raw(ta.data(), u, m, k, n);
                    send(*b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Transpose(a) => send(*a, up.transpose()),
            Op::Add(a, b) => {
                send(*a, up.clone());
                send(*b, up.clone());
            }
            Op::AddRow(a, row) => {
                send(*a, up.clone());
                let n = up.cols();
                let mut g = vec![0.0; n];
                for r in u.chunks(n) {
                    for (o, x) in g.iter_mut().zip(r) {
                        *o += x;
                    }
                }
                send(*row, Tensor::row_vector(g));
            }
            Op::AddConst(a) => send(*a, up.clone()),
            Op::MulConst(a, mask) => {
                let g = u.iter().zip(mask).map(|(x, m)| x * m).collect();
                send(*a, Tensor::from_parts(up.shape().to_vec(), g));
            }
            Op::Scale(a, c) => {
                let g = u.iter().map(|x| x * c).collect();
                send(*a, Tensor::from_parts(up.shape().to_vec(), g));
            }
            Op::Combine(terms) => {
                for &(v, w) in terms {
                    let g = u.iter().map(|x| x * w).collect();
                    send(v, Tensor::from_parts(up.shape().to_vec(), g));
                }
            }
            Op::Gather(table, ids) => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut g = Tensor::zeros(tt.shape());
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut g.data_mut()[id * d..(id + 1) * d];
                    for (o, x) in dst.iter_mut().zip(&u[i * d..(i + 1) * d]) {
                        *o += x;
                    }
                }
                send(*table, g);
            }
            Op::ConcatCols(parts) => {
                let m = up.rows();
                let total = up.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut g = Vec::with_capacity(m * w);
                    for r in 0..m {
                        g.extend_from_slice(&u[r * total + offset..r * total + offset + w]);
                    }
                    send(p, Tensor::from_parts(vec![m, w], g));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = up.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let g = u[offset * n..(offset + rows) * n].to_vec();
                    send(p, Tensor::from_parts(vec![rows, n], g));
                    offset += rows;
                }
            }
            Op::SelectRow(a, row) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let mut g = Tensor::zeros(ta.shape());
                g.data_mut()[row * n..(row + 1) * n].copy_from_slice(u);
                send(*a, g);
            }
            Op::MeanRows(a, count) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let inv = 1.0 / *count as f64;
                let mut g = Tensor::zeros(ta.shape());
                for r in 0..*count {
                    for (o, x) in g.data_mut()[r * n..(r + 1) * n].iter_mut().zip(u) {
                        *o = x * inv;
                    }
                }
                send(*a, g);
            }
            Op::SumAll(a) => {
                send(*a, Tensor::full(self.value(*a).shape(), u[0]));
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), ur) in g.chunks_mut(n).zip(y.chunks(n)).zip(u.chunks(n)) {
                    let dot: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gr[j] = yr[j] * (ur[j] - dot);
                    }
                }
                send(*a, Tensor::from_parts(node.value.shape().to_vec(), g));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let g = u.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                send(*a, Tensor::from_parts(up.shape().to_vec(), g));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let g = u.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                send(*a, Tensor::from_parts(up.shape().to_vec(), g));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let g = u
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x < *lo || x > *hi { 0.0 } else { *g })
                    .collect();
                send(*a, Tensor::from_parts(up.shape().to_vec(), g));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = up.cols();
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = vec![0.0; u.len()];
                for (r, (ur, xh)) in u.chunks(n).zip(normalized.chunks(n)).enumerate() {
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..n {
                        dgain[j] += ur[j] * xh[j];
                        dbias[j] += ur[j];
                        let dxh = ur[j] * gv[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                    }
                    let scale = inv_std[r] / n as f64;
                    for j in 0..n {
                        let dxh = ur[j] * gv[j];
                        dx[r * n + j] = scale * (n as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                send(*x, Tensor::from_parts(up.shape().to_vec(), dx));
                send(*gain, Tensor::row_vector(dgain));
                send(*bias, Tensor::row_vector(dbias));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let tl = self.value(*logits);
                let (b, c) = (tl.rows(), tl.cols());
                let scale = u[0] / b as f64;
                let mut g = vec![0.0; b * c];
                for (i, &y) in labels.iter().enumerate() {
                    if probs[i * c + y] < LOG_FLOOR {
                        continue;
                    }
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        g[i * c + j] = scale * (probs[i * c + j] - onehot);
                    }
                }
                send(*logits, Tensor::from_parts(vec![b, c], g));
            }
            Op::BinaryCrossEntropy { probs, targets } => {
                let tp = self.value(*probs);
                let scale = u[0] / targets.len() as f64;
                let g = tp
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| {
                        let mut d = 0.0;
                        if p >= LOG_FLOOR {
                            d -= t / p;
                        }
                        if 1.0 - p >= LOG_FLOOR {
                            d += (1.0 - t) / (1.0 - p);
                        }
                        scale * d
                    })
                    .collect();
                send(*probs, Tensor::from_parts(tp.shape().to_vec(), g));
            }
            Op::PlackettLuce { weights, order, live } => {
                let tw = self.value(*weights);
                let mut g = plackett_luce_grad(&tw.data()[..*live], order);
                g.iter_mut().for_each(|x| *x *= u[0]);
                g.resize(tw.numel(), 0.0);
                send(*weights, Tensor::from_parts(tw.shape().to_vec(), g));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn check_order(order: &[usize], live: usize) -> Result<()> {
    let mut seen = vec![false; live];
    for &i in order {
        if i >= live {
            return Err(AfaError::Index {
                what: "selected position",
                index: i,
                bound: live,
            });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(AfaError::contract(format!("position {i} selected twice")));
        }
    }
    Ok(())
}

/// `Σ_t [ln w̃(s_t) − ln Σ_{j not yet drawn} w̃(j)]` with `w̃ = max(w, LOG_FLOOR)`.
pub(crate) fn plackett_luce(weights: &[f64], order: &[usize]) -> f64 {
    let clamped: Vec<f64> = weights.iter().map(|w| w.max(LOG_FLOOR)).collect();
    let mut remaining: f64 = clamped.iter().sum();
    let mut total = 0.0;
    for &s in order {
        total += clamped[s].ln() - remaining.ln();
        remaining -= clamped[s];
    }
    total
}

fn plackett_luce_grad(weights: &[f64], order: &[usize]) -> Vec<f64> {
    let clamped: Vec<f64> = weights.iter().map(|w| w.max(LOG_FLOOR)).collect();
    let mut remaining: f64 = clamped.iter().sum();
    let mut drawn = vec![false; weights.len()];
    let mut g = vec![0.0; weights.len()];
    for &s in order {
        // every not-yet-drawn weight sits in this step's normalizer
        for j in 0..weights.len() {
            if !drawn[j] {
                g[j] -= 1.0 / remaining;
            }
        }
        g[s] += 1.0 / clamped[s];
        drawn[s] = true;
        remaining -= clamped[s];
    }
    for (gj, &w) in g.iter_mut().zip(weights) {
        if w < LOG_FLOOR {
            *gj = 0.0;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let b = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ib = g.matmul(i, b).unwrap();
        assert_eq!(g.value(ib), g.value(b));

        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ones = g.constant(Tensor::from_rows(&[&[1.0], &[1.0]]));
        let out = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_fixtures() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[0.0, 3f64.ln()], &[5.0, 5.0]]));
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15);
        assert!((v[1] - 0.75).abs() < 1e-15);
        assert_eq!(v[2], 0.5);
        assert_eq!(v[3], 0.5);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(vec![0.0, f64::NAN]));
        assert!(g.softmax_rows(x).is_err());
    }

    #[test]
    fn cross_entropy_fixtures() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[1, 4]));
        let l = g.cross_entropy(uniform, &[2]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let sat = g.constant(Tensor::row_vector(vec![20.0, 0.0, 0.0]));
        let l = g.cross_entropy(sat, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-8);

        assert!(matches!(
            g.cross_entropy(sat, &[3]),
            Err(AfaError::Index { index: 3, bound: 3, .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(AfaError::Contract(_))));
    }

    #[test]
    fn unreached_params_get_zero_grads() {
        let mut g = Graph::new();
        let used = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::zeros(&[3, 2]));
        let loss = g.scale(used, 3.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(used).unwrap().item(), 3.0);
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let y = g.add(x, x).unwrap();
        let z = g.combine(vec![(y, 2.0), (x, 1.0)]).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
    }

    #[test]
    fn plackett_luce_hand_values() {
        assert_eq!(plackett_luce(&[1.0], &[0]), 0.0);
        assert!((plackett_luce(&[0.5, 0.5], &[0]) - 0.5f64.ln()).abs() < 1e-15);
        let expected = 0.6f64.ln() + (0.3f64 / 0.4).ln();
        assert!((plackett_luce(&[0.6, 0.3, 0.1], &[0, 1]) - expected).abs() < 1e-12);
    }

    #[test]
    fn plackett_luce_rejects_bad_orders() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::row_vector(vec![0.5, 0.5, 0.0]));
        assert!(g.plackett_luce_log_prob(w, &[0, 0], 2).is_err());
        assert!(g.plackett_luce_log_prob(w, &[2], 2).is_err());
    }

    #[test]
    fn bce_fixture() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[2, 1], 0.5));
        let l = g.binary_cross_entropy(p, vec![0.0, 1.0]).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
    }
}
