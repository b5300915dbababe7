//! Reverse-mode gradient recording over [`DenseArray`] operations.
//!
//! A [`Tape`] records one forward computation. Matrices are 2-D row-major
//! arrays; a "scalar" is a `[1]` array. [`Tape::backward`] may be called once
//! per recording.

use std::collections::HashMap;

use super::array::gemm;
use super::{DenseArray, GradSet, ParamSet};
use crate::error::{Error, Result};

/// Lower/upper clamp applied to every probability produced on a tape.
pub const PROB_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    ScaleShift(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    MeanGroups { x: usize, group: usize },
    TemporalPairs { x: usize, frames: usize },
    ConcatCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    RowNorm(usize),
    MeanSquaredDiff(usize, usize),
    Bce { p: usize, labels: Vec<f64> },
    SoftmaxXent { logits: usize, labels: Vec<usize> },
    Mean(usize),
    WeightedSum(Vec<(usize, f64)>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: DenseArray,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
    consumed: bool,
}

fn mat_dims(op: &'static str, a: &DenseArray) -> Result<(usize, usize)> {
    if a.shape().len() != 2 {
        return Err(Error::shape(op, a.shape(), &[0, 0]));
    }
    Ok((a.shape()[0], a.shape()[1]))
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

    fn push(&mut self, value: DenseArray, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Records a constant. No gradient flows into it.
    pub fn input(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records parameter `name` from `params`; repeated calls return the same
    /// node so gradients from every use accumulate in one place.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&i) = self.params.get(name) {
            return Ok(Var(i));
        }
        let value = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?
            .clone();
        let v = self.push(value, Op::Param, true);
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    /// Copy of `x` with the gradient path cut.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.input(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::MatMul(a.0, b.0), ng))
    }

    /// `x + b` with `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let (n, m) = mat_dims("add_row", xv)?;
        if bv.len() != m {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..n {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let ng = self.needs(x.0) || self.needs(b.0);
        Ok(self.push(out, Op::AddRow(x.0, b.0), ng))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, sign: f64) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + sign * y)
            .collect();
        let value = DenseArray::new(av.shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        let op = if sign > 0.0 {
            Op::Add(a.0, b.0)
        } else {
            Op::Sub(a.0, b.0)
        };
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", -1.0)
    }

    /// `scale·x + shift`, elementwise.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.nodes[x.0].value.map(|v| scale * v + shift);
        let ng = self.needs(x.0);
        self.push(value, Op::ScaleShift(x.0, scale), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max(0.0));
        let ng = self.needs(x.0);
        self.push(value, Op::Relu(x.0), ng)
    }

    /// Logistic function, clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(logistic);
        let ng = self.needs(x.0);
        self.push(value, Op::Sigmoid(x.0), ng)
    }

    /// Mean over consecutive blocks of `group` rows: `[n·group × m] → [n × m]`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (rows, m) = mat_dims("mean_groups", xv)?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("mean_groups", xv.shape(), &[group]));
        }
        let n = rows / group;
        let mut out = DenseArray::zeros(&[n, m]);
        let inv = 1.0 / group as f64;
        for r in 0..rows {
            let src = xv.row(r);
            for (o, s) in out.row_mut(r / group).iter_mut().zip(src) {
                *o += s * inv;
            }
        }
        let ng = self.needs(x.0);
        Ok(self.push(out, Op::MeanGroups { x: x.0, group }, ng))
    }

    /// Kernel-2 temporal window: `[n·F × c] → [n·(F-1) × 2c]`, output row
    /// `(i, t)` is the concatenation of input rows `(i, t)` and `(i, t+1)`.
    pub fn temporal_pairs(&mut self, x: Var, frames: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (rows, c) = mat_dims("temporal_pairs", xv)?;
        if frames < 2 || rows % frames != 0 {
            return Err(Error::shape("temporal_pairs", xv.shape(), &[frames]));
        }
        let n = rows / frames;
        let mut out = DenseArray::zeros(&[n * (frames - 1), 2 * c]);
        for i in 0..n {
            for t in 0..frames - 1 {
                let dst = out.row_mut(i * (frames - 1) + t);
                dst[..c].copy_from_slice(xv.row(i * frames + t));
                dst[c..].copy_from_slice(xv.row(i * frames + t + 1));
            }
        }
        let ng = self.needs(x.0);
        Ok(self.push(out, Op::TemporalPairs { x: x.0, frames }, ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, p) = mat_dims("concat_cols", av)?;
        let (n2, q) = mat_dims("concat_cols", bv)?;
        if n != n2 {
            return Err(Error::shape("concat_cols", av.shape(), bv.shape()));
        }
        let mut out = DenseArray::zeros(&[n, p + q]);
        for r in 0..n {
            let dst = out.row_mut(r);
            dst[..p].copy_from_slice(av.row(r));
            dst[p..].copy_from_slice(bv.row(r));
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(out, Op::ConcatCols(a.0, b.0), ng))
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (n, m) = mat_dims("gather_rows", xv)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("gather_rows: row {bad} out of {n}")));
        }
        let mut out = DenseArray::zeros(&[index.len(), m]);
        for (r, &src) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(src));
        }
        let ng = self.needs(x.0);
        Ok(self.push(out, Op::GatherRows(x.0, index), ng))
    }

    /// Euclidean norm of each row: `[n × m] → [n]`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (n, _) = mat_dims("row_norm", xv)?;
        let data = (0..n)
            .map(|r| xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let ng = self.needs(x.0);
        Ok(self.push(DenseArray::from_vec(data), Op::RowNorm(x.0), ng))
    }

    /// Mean of squared elementwise differences, as a scalar.
    pub fn mean_squared_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.len() != bv.len() || av.cols() != bv.cols() {
            return Err(Error::shape("mean_squared_diff", av.shape(), bv.shape()));
        }
        let n = av.len().max(1) as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(DenseArray::scalar(s / n), Op::MeanSquaredDiff(a.0, b.0), ng))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 labels.
    pub fn bce(&mut self, p: Var, labels: Vec<f64>) -> Result<Var> {
        let pv = &self.nodes[p.0].value;
        if pv.len() != labels.len() {
            return Err(Error::shape("bce", pv.shape(), &[labels.len()]));
        }
        let n = labels.len().max(1) as f64;
        let s: f64 = pv
            .data()
            .iter()
            .zip(&labels)
            .map(|(&pi, &y)| bce_term(pi, y))
            .sum();
        let ng = self.needs(p.0);
        Ok(self.push(DenseArray::scalar(s / n), Op::Bce { p: p.0, labels }, ng))
    }

    /// Mean softmax cross-entropy of `[n × k]` logits against class indices.
    pub fn softmax_xent(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let (n, k) = mat_dims("softmax_xent", lv)?;
        if n != labels.len() || labels.iter().any(|&y| y >= k) {
            return Err(Error::shape("softmax_xent", lv.shape(), &[labels.len()]));
        }
        let mut s = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            s += lse - row[y];
        }
        let ng = self.needs(logits.0);
        let value = DenseArray::scalar(s / n.max(1) as f64);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits: logits.0,
                labels,
            },
            ng,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let m = xv.sum() / xv.len().max(1) as f64;
        let ng = self.needs(x.0);
        self.push(DenseArray::scalar(m), Op::Mean(x.0), ng)
    }

    /// `Σ weight·term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            let val = &self.nodes[v.0].value;
            if val.len() != 1 {
                return Err(Error::shape("weighted_sum", val.shape(), &[1]));
            }
            s += w * val.data()[0];
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v.0));
        let op = Op::WeightedSum(terms.iter().map(|&(v, w)| (v.0, w)).collect());
        Ok(self.push(DenseArray::scalar(s), op, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let ng = self.needs(x.0);
        Ok(self.push(value, Op::Reshape(x.0), ng))
    }

    /// Gradient of scalar `loss` with respect to every entry of `params`.
    /// Parameters the recording never touched get all-zero gradients.
    pub fn backward(&mut self, loss: Var, params: &ParamSet) -> Result<GradSet> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", self.nodes[loss.0].value.shape(), &[1]));
        }
        let mut grads: Vec<Option<DenseArray>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(DenseArray::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let mut out = params.zeros_like();
        for (name, &idx) in &self.params {
            let Some(target) = out.get_mut(name) else {
                return Err(Error::invalid(format!("parameter {name} not in set")));
            };
            if let Some(g) = grads.get_mut(idx).and_then(Option::take) {
                *target = g;
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, dy: &DenseArray, grads: &mut [Option<DenseArray>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, g: DenseArray| {
            if !self.nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += v;
                    }
                }
                slot @ None => {
                    let shape = self.nodes[j].value.shape().to_vec();
                    *slot = Some(g.reshape(&shape).expect("gradient size matches value"));
                }
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if self.nodes[*a].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy.data(), (n, 1), val(*b).data(), (1, n), &mut da, 0.0);
                    acc(*a, DenseArray::from_vec(da));
                }
                if self.nodes[*b].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), (1, k), dy.data(), (n, 1), &mut db, 0.0);
                    acc(*b, DenseArray::from_vec(db));
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, dy.clone());
                let m = val(*b).len();
                let mut db = vec![0.0; m];
                for r in 0..dy.rows() {
                    for (d, g) in db.iter_mut().zip(dy.row(r)) {
                        *d += g;
                    }
                }
                acc(*b, DenseArray::from_vec(db));
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.map(|v| -v));
            }
            Op::ScaleShift(x, s) => acc(*x, dy.map(|v| v * s)),
            Op::Relu(x) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &xi)| if xi > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, DenseArray::from_vec(data));
            }
            Op::Sigmoid(x) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                acc(*x, DenseArray::from_vec(data));
            }
            Op::MeanGroups { x, group } => {
                let m = dy.cols();
                let rows = val(*x).rows();
                let inv = 1.0 / *group as f64;
                let mut dx = vec![0.0; rows * m];
                for r in 0..rows {
                    for (d, g) in dx[r * m..(r + 1) * m].iter_mut().zip(dy.row(r / group)) {
                        *d = g * inv;
                    }
                }
                acc(*x, DenseArray::from_vec(dx));
            }
            Op::TemporalPairs { x, frames } => {
                let c = val(*x).cols();
                let rows = val(*x).rows();
                let n = rows / frames;
                let mut dx = vec![0.0; rows * c];
                for clip in 0..n {
                    for t in 0..frames - 1 {
                        let g = dy.row(clip * (frames - 1) + t);
                        let r0 = clip * frames + t;
                        for j in 0..c {
                            dx[r0 * c + j] += g[j];
                            dx[(r0 + 1) * c + j] += g[c + j];
                        }
                    }
                }
                acc(*x, DenseArray::from_vec(dx));
            }
            Op::ConcatCols(a, b) => {
                let p = val(*a).cols();
                let q = val(*b).cols();
                let n = dy.rows();
                let mut da = Vec::with_capacity(n * p);
                let mut db = Vec::with_capacity(n * q);
                for r in 0..n {
                    da.extend_from_slice(&dy.row(r)[..p]);
                    db.extend_from_slice(&dy.row(r)[p..]);
                }
                acc(*a, DenseArray::from_vec(da));
                acc(*b, DenseArray::from_vec(db));
            }
            Op::GatherRows(x, index) => {
                let m = dy.cols();
                let mut dx = vec![0.0; val(*x).len()];
                for (r, &src) in index.iter().enumerate() {
                    for (d, g) in dx[src * m..(src + 1) * m].iter_mut().zip(dy.row(r)) {
                        *d += g;
                    }
                }
                acc(*x, DenseArray::from_vec(dx));
            }
            Op::RowNorm(x) => {
                let xv = val(*x);
                let m = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    let norm = node.value.data()[r];
                    if norm > 0.0 {
                        let g = dy.data()[r] / norm;
                        for (d, xi) in dx[r * m..(r + 1) * m].iter_mut().zip(xv.row(r)) {
                            *d = g * xi;
                        }
                    }
                }
                acc(*x, DenseArray::from_vec(dx));
            }
            Op::MeanSquaredDiff(a, b) => {
                let g = dy.data()[0] * 2.0 / val(*a).len().max(1) as f64;
                let diff: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(x, y)| g * (x - y))
                    .collect();
                acc(*b, DenseArray::from_vec(diff.iter().map(|v| -v).collect()));
                acc(*a, DenseArray::from_vec(diff));
            }
            Op::Bce { p, labels } => {
                let n = labels.len().max(1) as f64;
                let g = dy.data()[0] / n;
                let data = val(*p)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&pi, &y)| {
                        let pc = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        g * (-y / pc + (1.0 - y) / (1.0 - pc))
                    })
                    .collect();
                acc(*p, DenseArray::from_vec(data));
            }
            Op::SoftmaxXent { logits, labels } => {
                let lv = val(*logits);
                let (n, k) = (lv.rows(), lv.cols());
                let g = dy.data()[0] / n.max(1) as f64;
                let mut dx = vec![0.0; n * k];
                for (r, &y) in labels.iter().enumerate() {
                    let row = lv.row(r);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - mx).exp() / z;
                        dx[r * k + j] = g * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                acc(*logits, DenseArray::from_vec(dx));
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let g = dy.data()[0] / n.max(1) as f64;
                acc(*x, DenseArray::filled(&[n], g));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, DenseArray::scalar(w * dy.data()[0]));
                }
            }
            Op::Reshape(x) => acc(*x, dy.clone()),
        }
    }
}

/// Logistic function clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn logistic(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub(crate) fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Records `x·W + b` using parameters `{prefix}.w` and `{prefix}.b`.
pub fn affine_forward(tape: &mut Tape, params: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.w"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}
