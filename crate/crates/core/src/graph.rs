//! Reverse-mode automatic differentiation over a closed set of rank-2 ops.
//!
//! A [`Graph`] records every op in insertion order. Because an op can only
//! consume values that already exist, insertion order is a topological
//! order and [`Graph::backward`] visits each node exactly once in reverse.
//!
//! Every op validates shapes eagerly and refuses to record a non-finite
//! result, so a NaN is reported at the op that produced it rather than at
//! the loss.

use crate::error::{Error, Result};
use crate::metrics::distance::{distance_grad_q, distance_unchecked, DistanceKind};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows forming one causal sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Which rows of a logits matrix are scored, and the example each belongs to.
///
/// Row weights are `1 / (N · K_i)` so that the loss is the mean over examples
/// of the per-example mean over answer tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerMask {
    rows: Vec<Option<usize>>,
}

impl AnswerMask {
    pub fn new(rows: Vec<Option<usize>>) -> Self {
        Self { rows }
    }

    /// Every row scored, one row per example.
    pub fn all(rows: usize) -> Self {
        Self {
            rows: (0..rows).map(Some).collect(),
        }
    }

    pub fn rows(&self) -> &[Option<usize>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        let n_examples = self.rows.iter().flatten().max().map_or(0, |m| m + 1);
        let mut counts = vec![0usize; n_examples];
        for e in self.rows.iter().flatten() {
            counts[*e] += 1;
        }
        let present = counts.iter().filter(|c| **c > 0).count() as f64;
        self.rows
            .iter()
            .map(|r| match r {
                Some(e) => 1.0 / (present * counts[*e] as f64),
                None => 0.0,
            })
            .collect()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        src: Var,
        start: usize,
    },
    Reshape(Var),
    SoftmaxRows(Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    RowDistance {
        probs: Var,
        target: Tensor,
        kind: DistanceKind,
    },
    WeightedSum {
        src: Var,
        weights: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

impl Graph {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str, requires_grad: bool) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    /// Records an input. Rank-1 inputs are viewed as a single row.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        let t = if t.shape().len() == 2 {
            t
        } else {
            let (r, c) = (t.rows(), t.cols());
            t.reshape(&[r, c])?
        };
        self.push(t, Op::Leaf, "leaf", requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), "matmul", rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err("add", a, b));
        }
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::matrix(r, c, out)?, Op::Add(a, b), "add", rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::matrix(r, c, out)?, Op::Mul(a, b), "mul", rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (r, cols) = self.dims(a);
        let out = self.value(a).data().iter().map(|x| x * c).collect();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::matrix(r, cols, out)?, Op::Scale(a, c), "scale", rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::matrix(r, c, out)?, Op::Gelu(a), "gelu", rg)
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    limit: v,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.any_grad(&[table]);
        self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
            rg,
        )
    }

    /// Stacks row blocks vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of zero parts"));
        };
        let cols = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.dims(p).1 != cols {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += self.dims(p).0;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec()), "concat_rows", rg)
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(src);
        if start + len > r {
            return Err(Error::Index {
                op: "slice_rows",
                index: start + len,
                limit: r,
            });
        }
        let out = self.value(src).data()[start * c..(start + len) * c].to_vec();
        let rg = self.any_grad(&[src]);
        self.push(Tensor::matrix(len, c, out)?, Op::SliceRows { src, start }, "slice_rows", rg)
    }

    pub fn reshape(&mut self, src: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(src).clone().reshape(&[rows, cols])?;
        let rg = self.any_grad(&[src]);
        self.push(t, Op::Reshape(src), "reshape", rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.any_grad(&[a]);
        self.push(Tensor::matrix(r, c, out)?, Op::SoftmaxRows(a), "softmax_rows", rg)
    }

    /// Single-head scaled dot-product attention, causal within each segment.
    ///
    /// Row `i` of a segment attends to rows `0..=i` of the same segment only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, segments: &[Segment]) -> Result<Var> {
        let (t, d) = self.dims(q);
        if self.dims(k) != (t, d) {
            return Err(self.shape_err("causal_attention", q, k));
        }
        if self.dims(v) != (t, d) {
            return Err(self.shape_err("causal_attention", q, v));
        }
        let mut covered = 0;
        for s in segments {
            if s.start != covered || s.len == 0 {
                return Err(Error::contract("attention segments must tile the rows in order"));
            }
            covered += s.len;
        }
        if covered != t {
            return Err(Error::contract(format!("attention segments cover {covered} of {t} rows")));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; t * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.len * s.len).sum());
        let mut row = Vec::new();
        for s in segments {
            for i in 0..s.len {
                let qi = &qd[(s.start + i) * d..(s.start + i + 1) * d];
                row.clear();
                for j in 0..=i {
                    let kj = &kd[(s.start + j) * d..(s.start + j + 1) * d];
                    row.push(scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
                }
                softmax_in_place(&mut row);
                let oi = &mut out[(s.start + i) * d..(s.start + i + 1) * d];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &vd[(s.start + j) * d..(s.start + j + 1) * d];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
                probs.extend_from_slice(&row);
                probs.extend(std::iter::repeat_n(0.0, s.len - i - 1));
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        self.push(
            Tensor::matrix(t, d, out)?,
            Op::CausalAttention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                probs,
            },
            "causal_attention",
            rg,
        )
    }

    /// Weighted negative log-likelihood of `targets` under row softmax,
    /// with the weights induced by `mask`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &AnswerMask) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r || mask.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![r, c],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let weights = mask.weights();
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            softmax_in_place(row);
            if weights[i] == 0.0 {
                continue;
            }
            let t = targets[i];
            if t >= c {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    limit: c,
                });
            }
            // -log softmax computed from logits for accuracy
            let lr = self.value(logits).row(i);
            let max = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lr.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += weights[i] * (lse - lr[t]);
        }
        let rg = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            "cross_entropy",
            rg,
        )
    }

    /// Per-row distance from fixed target distributions to `probs`; `rows×1`.
    pub fn row_distance(&mut self, probs: Var, target: &Tensor, kind: DistanceKind) -> Result<Var> {
        let (r, c) = self.dims(probs);
        if target.rows() != r || target.cols() != c {
            return Err(Error::Shape {
                op: "row_distance",
                lhs: vec![r, c],
                rhs: target.shape().to_vec(),
            });
        }
        let out = (0..r)
            .map(|i| distance_unchecked(target.row(i), self.value(probs).row(i), kind))
            .collect();
        let rg = self.any_grad(&[probs]);
        self.push(
            Tensor::matrix(r, 1, out)?,
            Op::RowDistance {
                probs,
                target: target.clone(),
                kind,
            },
            "row_distance",
            rg,
        )
    }

    /// `Σ wᵢ aᵢ` over all elements.
    pub fn weighted_sum(&mut self, src: Var, weights: &[f64]) -> Result<Var> {
        let a = self.value(src).data();
        if a.len() != weights.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: self.value(src).shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = a.iter().zip(weights).map(|(x, w)| x * w).sum();
        let rg = self.any_grad(&[src]);
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                src,
                weights: weights.to_vec(),
            },
            "weighted_sum",
            rg,
        )
    }

    pub fn sum(&mut self, src: Var) -> Result<Var> {
        let s = self.value(src).sum();
        let rg = self.any_grad(&[src]);
        self.push(Tensor::scalar(s), Op::Sum(src), "sum", rg)
    }

    /// Gradients of the scalar `loss` with respect to every node requiring one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter().zip(grads.iter()) {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        op: format!("backward through {:?}", op_name(&node.op)),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                acc(*a, &mut |ga| gemm(m, n, k, g, false, bd, true, ga, true));
                acc(*b, &mut |gb| gemm(k, m, n, ad, true, g, false, gb, true));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::Gelu(a) => {
                let ad = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * gelu_grad(ad[i]);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.dims(*table).1;
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let slice = &g[offset..offset + len];
                    acc(*p, &mut |gp| gp.iter_mut().zip(slice).for_each(|(x, y)| *x += y));
                    offset += len;
                }
            }
            Op::SliceRows { src, start } => {
                let c = self.dims(*src).1;
                let from = start * c;
                acc(*src, &mut |gs| {
                    gs[from..from + g.len()].iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            Op::Reshape(src) => acc(*src, &mut |gs| gs.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let y = out.data();
                acc(*a, &mut |ga| {
                    for (r, (gr, yr)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CausalAttention {
                q,
                k,
                v,
                segments,
                probs,
            } => {
                let (t, d) = self.dims(*q);
                let scale = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut offset = 0;
                let mut dp = Vec::new();
                for s in segments {
                    for i in 0..s.len {
                        let p = &probs[offset + i * s.len..offset + i * s.len + i + 1];
                        let gi = &g[(s.start + i) * d..(s.start + i + 1) * d];
                        dp.clear();
                        for (j, &pj) in p.iter().enumerate() {
                            let row = (s.start + j) * d;
                            dp.push(gi.iter().zip(&vd[row..row + d]).map(|(a, b)| a * b).sum::<f64>());
                            for c in 0..d {
                                dv[row + c] += pj * gi[c];
                            }
                        }
                        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        let qi = (s.start + i) * d;
                        for (j, &pj) in p.iter().enumerate() {
                            let ds = pj * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let row = (s.start + j) * d;
                            for c in 0..d {
                                dq[qi + c] += ds * kd[row + c];
                                dk[row + c] += ds * qd[qi + c];
                            }
                        }
                    }
                    offset += s.len * s.len;
                }
                acc(*q, &mut |x| x.iter_mut().zip(&dq).for_each(|(a, b)| *a += b));
                acc(*k, &mut |x| x.iter_mut().zip(&dk).for_each(|(a, b)| *a += b));
                acc(*v, &mut |x| x.iter_mut().zip(&dv).for_each(|(a, b)| *a += b));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.dims(*logits).1;
                let g0 = g[0];
                acc(*logits, &mut |gl| {
                    for (r, w) in weights.iter().enumerate() {
                        if *w == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            let ind = if j == targets[r] { 1.0 } else { 0.0 };
                            gl[r * c + j] += g0 * w * (probs[r * c + j] - ind);
                        }
                    }
                });
            }
            Op::RowDistance { probs, target, kind } => {
                let c = self.dims(*probs).1;
                let pv = self.value(*probs);
                let mut row = vec![0.0; c];
                acc(*probs, &mut |gp| {
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        distance_grad_q(target.row(r), pv.row(r), *kind, &mut row);
                        for j in 0..c {
                            gp[r * c + j] += gr * row[j];
                        }
                    }
                });
            }
            Op::WeightedSum { src, weights } => {
                let g0 = g[0];
                acc(*src, &mut |gs| gs.iter_mut().zip(weights).for_each(|(x, w)| *x += g0 * w));
            }
            Op::Sum(src) => {
                let g0 = g[0];
                acc(*src, &mut |gs| gs.iter_mut().for_each(|x| *x += g0));
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Gelu(..) => "gelu",
        Op::Embedding { .. } => "embedding",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::Reshape(..) => "reshape",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::CausalAttention { .. } => "causal_attention",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::RowDistance { .. } => "row_distance",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::Sum(..) => "sum",
    }
}

/// Central finite differences `(f(θ + εeᵢ) − f(θ − εeᵢ)) / 2ε`, one
/// coordinate at a time. This is the reference every gradient is checked
/// against.
pub fn finite_diff_grad<F>(mut f: F, theta: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let mut probe = theta.clone();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Tensor::new(theta.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]), true).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_square_norm_is_identity() {
        let data = [0.3, -1.2, 2.5, 0.0];
        let mut g = Graph::new();
        let x = g.leaf(t(2, 2, &data), true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.get(x).unwrap(), &data);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t(1, 2, &[1.0, 2.0]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        match g.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_basic_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(2, 4, &[0.7; 8])).unwrap();
        let p = g.softmax_rows(x).unwrap();
        assert!(g.value(p).data().iter().all(|v| (v - 0.25).abs() < 1e-15));

        let big = g.constant(t(1, 2, &[1000.0, 0.0])).unwrap();
        let p = g.softmax_rows(big).unwrap();
        assert_eq!(g.value(p).data()[0], 1.0);
        assert!(g.value(p).data()[1] < 1e-300);

        let a = g.constant(t(1, 3, &[0.1, -2.0, 3.3])).unwrap();
        let b = g.constant(t(1, 3, &[17.1, 15.0, 20.3])).unwrap();
        let (pa, pb) = (g.softmax_rows(a).unwrap(), g.softmax_rows(b).unwrap());
        for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_v() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 4])).unwrap();
        let l = g.cross_entropy(x, &[0, 1, 3], &AnswerMask::all(3)).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [5.0, 10.0, 20.0] {
            let mut g = Graph::new();
            let x = g.constant(t(1, 3, &[margin, 0.0, 0.0])).unwrap();
            let l = g.cross_entropy(x, &[0], &AnswerMask::all(1)).unwrap();
            let v = g.value(l).data()[0];
            assert!(v < prev && v >= 0.0);
            prev = v;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        assert!(matches!(
            g.cross_entropy(x, &[4], &AnswerMask::all(1)),
            Err(Error::Index { .. })
        ));
        // masked rows are not checked
        let m = AnswerMask::new(vec![None]);
        assert!(g.cross_entropy(x, &[4], &m).is_ok());
    }

    #[test]
    fn answer_mask_weights_follow_example_grouping() {
        let m = AnswerMask::new(vec![Some(0), None, Some(1), Some(1), Some(1)]);
        let w = m.weights();
        assert_eq!(w[0], 0.5);
        assert_eq!(w[1], 0.0);
        assert!((w[2] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_is_reported_at_the_op() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 1, &[1e300])).unwrap();
        match g.mul(x, x) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "mul"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn attention_first_row_copies_value() {
        let mut g = Graph::new();
        let q = g.constant(t(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let v = g.constant(t(2, 2, &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let o = g.causal_attention(q, q, v, &[Segment { start: 0, len: 2 }]).unwrap();
        assert_eq!(g.value(o).row(0), &[3.0, 4.0]);
        let bad = g.causal_attention(q, q, v, &[Segment { start: 0, len: 1 }]);
        assert!(bad.is_err());
    }

    #[test]
    fn finite_diff_of_simple_functions() {
        let theta = t(1, 3, &[0.5, -1.0, 2.0]);
        let g = finite_diff_grad(|x| Ok(0.5 * x.data().iter().map(|v| v * v).sum::<f64>()), &theta, 1e-4)
            .unwrap();
        for (a, b) in g.data().iter().zip(theta.data()) {
            assert!((a - b).abs() < 1e-8);
        }
        let g = finite_diff_grad(|x| Ok(x.sum()), &t(1, 2, &[0.0, 0.0]), 0.5).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0]);
        assert!(finite_diff_grad(|x| Ok(x.sum()), &theta, 0.0).is_err());
    }
}
