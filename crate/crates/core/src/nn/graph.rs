//! Reverse-mode automatic differentiation over a recorded computation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value. [`Graph::backward`] walks the record in reverse and
//! returns gradients for every trainable parameter that the loss reaches.
//!
//! Parameters enter through [`Graph::param`], which marks the node as
//! requiring a gradient only if the parameter is trainable. Plain inputs and
//! [`Graph::detach`]ed values are constants, so gradient flow stops there.

use std::collections::BTreeMap;

use super::kernels;
use super::params::{ParamId, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    SumAll(NodeId),
    Scale(NodeId, f64),
    Gelu {
        x: NodeId,
        slope: Vec<f64>,
    },
    LayerNorm {
        x: NodeId,
        affine: Option<(NodeId, NodeId)>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
    Softmax(NodeId),
    CrossEntropy {
        logits: NodeId,
        target: NodeId,
        log_probs: Vec<f64>,
        active: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing in it requires a gradient.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &str) -> Result<NodeId> {
        value.ensure_finite(what)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A constant input; gradients never flow into it.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Constant, false, "input")
    }

    /// A free leaf that collects a gradient (useful for testing against raw values).
    pub fn variable(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Variable, true, "variable")
    }

    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Result<NodeId> {
        let p = params.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable, &p.name)
    }

    /// Stop-gradient: a constant copy of `x`'s current value.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        self.push(v, Op::Constant, false, "detach")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Adds a `[n]` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).shape() != [n] {
            return Err(Error::Shape(format!(
                "bias {:?} for rows of width {n}",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(Tensor::new(vec![m, n], out)?, Op::AddBias(x, bias), rg, "add_bias")
    }

    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let h = self.matmul(x, weight)?;
        self.add_bias(h, bias)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    /// Elementwise product of equally shaped nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("mul {:?} * {:?}", va.shape(), vb.shape())));
        }
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg, "sum_all")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg, "scale")
    }

    /// Sum of equally shaped nodes.
    pub fn sum(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Invalid("sum of no nodes".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let rg = self.rg(&[x]) && self.grad_enabled;
        let mut out = Vec::with_capacity(v.numel());
        let mut slope = Vec::with_capacity(if rg { v.numel() } else { 0 });
        for &a in v.data() {
            let (y, dy) = kernels::gelu_with_grad(a);
            out.push(y);
            if rg {
                slope.push(dy);
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::Gelu { x, slope }, rg, "gelu")
    }

    /// Row-wise layer normalisation, optionally followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: NodeId, affine: Option<(NodeId, NodeId)>) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        if let Some((g, b)) = affine {
            if self.value(g).shape() != [n] || self.value(b).shape() != [n] {
                return Err(Error::Shape(format!("layer norm affine params for width {n}")));
            }
        }
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for row in self.value(x).rows() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v - mean) * is));
        }
        let mut out = xhat.clone();
        let mut parents = vec![x];
        if let Some((g, b)) = affine {
            let (gv, bv) = (self.value(g).data(), self.value(b).data());
            for row in out.chunks_mut(n) {
                for ((o, gi), bi) in row.iter_mut().zip(gv).zip(bv) {
                    *o = *o * gi + bi;
                }
            }
            parents.extend([g, b]);
        }
        let rg = self.rg(&parents);
        let op = Op::LayerNorm {
            x,
            affine,
            xhat,
            inv_std,
        };
        self.push(Tensor::new(vec![m, n], out)?, op, rg, "layer_norm")
    }

    /// Multi-head self-attention; each `(start, len)` segment of rows is one sequence.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<(usize, usize)>,
    ) -> Result<NodeId> {
        let (m, w) = self.value(q).dims2()?;
        if self.value(k).shape() != [m, w] || self.value(v).shape() != [m, w] {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || w % heads != 0 {
            return Err(Error::Shape(format!("width {w} not divisible into {heads} heads")));
        }
        if segments.iter().any(|&(s, l)| s + l > m) {
            return Err(Error::Shape(format!("attention segment beyond {m} rows")));
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            w,
            heads,
            &segments,
        );
        let rg = self.rg(&[q, k, v]);
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
            probs,
        };
        self.push(Tensor::new(vec![m, w], out)?, op, rg, "attention")
    }

    /// Inverted dropout with a caller-supplied mask of 0 / 1 entries.
    pub fn dropout(&mut self, x: NodeId, keep: &[bool], rate: f64) -> Result<NodeId> {
        let v = self.value(x);
        if keep.len() != v.numel() {
            return Err(Error::Shape("dropout mask length".into()));
        }
        let s = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let out = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Dropout { x, mask }, rg, "dropout")
    }

    /// Selects rows of a `[rows, width]` table (embedding lookup, pooling).
    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let (r, w) = self.value(table).dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Invalid(format!("row index {bad} out of range for {r} rows")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * w);
        for &i in &indices {
            out.extend_from_slice(t.row(i));
        }
        let t = Tensor::new(vec![indices.len(), w], out)?;
        let rg = self.rg(&[table]);
        self.push(t, Op::Gather { table, indices }, rg, "gather")
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![m, n], out)?, Op::Softmax(x), rg, "softmax")
    }

    /// Batch-mean cross-entropy `-(1/B) Σ_b Σ_c target[b,c] · ln softmax(logits)[b,c]`,
    /// with log-probabilities floored at `ln(PROB_FLOOR)`.
    pub fn cross_entropy(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        let (b, c) = self.value(logits).dims2()?;
        if self.value(target).shape() != [b, c] {
            return Err(Error::Shape(format!(
                "cross entropy logits [{b},{c}] vs target {:?}",
                self.value(target).shape()
            )));
        }
        let floor = PROB_FLOOR.ln();
        let mut log_probs = Vec::with_capacity(b * c);
        let mut active = Vec::with_capacity(b * c);
        for row in self.value(logits).rows() {
            for lp in kernels::log_softmax(row) {
                active.push(lp > floor);
                log_probs.push(lp.max(floor));
            }
        }
        let t = self.value(target).data();
        let loss = -t.iter().zip(&log_probs).map(|(a, l)| a * l).sum::<f64>() / b as f64;
        let rg = self.rg(&[logits, target]);
        let op = Op::CrossEntropy {
            logits,
            target,
            log_probs,
            active,
        };
        self.push(Tensor::scalar(loss), op, rg, "cross_entropy")
    }

    /// Propagates gradients from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Invalid("backward called on a node this graph never recorded".into()))?;
        if node.value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(node.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(pid), Some(g)) = (&node.op, &grads[idx]) {
                match params.get_mut(pid) {
                    None => {
                        params.insert(*pid, g.clone());
                    }
                    Some(acc) => Tensor::add_assign(acc, g),
                }
            }
        }
        Ok(Gradients { params, nodes: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Vec<f64>) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        let shape = self.nodes[id.0].value.shape().to_vec();
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(Tensor::new(shape, delta)?),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gd, false, self.value(*b).data(), true, 0.0, &mut da);
                    self.accumulate(grads, *a, da)?;
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.value(*a).data(), true, gd, false, 0.0, &mut db);
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, gd.to_vec())?;
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).numel();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    self.accumulate(grads, *bias, db)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec())?;
                self.accumulate(grads, *b, gd.to_vec())?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, d)?;
                }
                if self.requires_grad(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, d)?;
                }
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0]; n])?;
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, gd.iter().map(|v| v * c).collect())?;
            }
            Op::Gelu { x, slope } => {
                let dx = gd.iter().zip(slope).map(|(g, s)| g * s).collect();
                self.accumulate(grads, *x, dx)?;
            }
            Op::LayerNorm {
                x,
                affine,
                xhat,
                inv_std,
            } => {
                let n = self.value(*x).dims2()?.1;
                let gain = affine.map(|(gn, _)| self.value(gn).data());
                if let Some((gn, bn)) = affine {
                    if self.requires_grad(*gn) || self.requires_grad(*bn) {
                        let mut dg = vec![0.0; n];
                        let mut dbias = vec![0.0; n];
                        for (grow, xrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                dg[j] += grow[j] * xrow[j];
                                dbias[j] += grow[j];
                            }
                        }
                        self.accumulate(grads, *gn, dg)?;
                        self.accumulate(grads, *bn, dbias)?;
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let mut dxhat = vec![0.0; n];
                    for (r, (grow, xrow)) in gd.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dxhat[j] = grow[j] * gain.map_or(1.0, |gv| gv[j]);
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / n as f64;
                        for j in 0..n {
                            dx[r * n + j] = scale * (n as f64 * dxhat[j] - s1 - xrow[j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let w = self.value(*q).dims2()?.1;
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    gd,
                    w,
                    *heads,
                    segments,
                );
                self.accumulate(grads, *q, dq)?;
                self.accumulate(grads, *k, dk)?;
                self.accumulate(grads, *v, dv)?;
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, gd.iter().zip(mask).map(|(g, m)| g * m).collect())?;
            }
            Op::Gather { table, indices } => {
                if self.requires_grad(*table) {
                    let (r, w) = self.value(*table).dims2()?;
                    let mut dt = vec![0.0; r * w];
                    for (grow, &i) in gd.chunks(w).zip(indices) {
                        for (d, v) in dt[i * w..(i + 1) * w].iter_mut().zip(grow) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *table, dt)?;
                }
            }
            Op::Softmax(x) => {
                let n = node.value.dims2()?.1;
                let mut dx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(n).zip(node.value.rows()) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(gi, yi)| yi * (gi - dot)));
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::CrossEntropy {
                logits,
                target,
                log_probs,
                active,
            } => {
                let upstream = gd[0];
                let (b, c) = self.value(*logits).dims2()?;
                let t = self.value(*target).data();
                let inv_b = upstream / b as f64;
                if self.requires_grad(*logits) {
                    let mut dz = vec![0.0; b * c];
                    for r in 0..b {
                        let row = r * c..(r + 1) * c;
                        let mass: f64 = t[row.clone()]
                            .iter()
                            .zip(&active[row.clone()])
                            .filter(|(_, &a)| a)
                            .map(|(ti, _)| ti)
                            .sum();
                        for j in row {
                            let p = log_probs[j].exp();
                            let hot = if active[j] { t[j] } else { 0.0 };
                            dz[j] = inv_b * (p * mass - hot);
                        }
                    }
                    self.accumulate(grads, *logits, dz)?;
                }
                if self.requires_grad(*target) {
                    let dt = log_probs.iter().map(|l| -inv_b * l).collect();
                    self.accumulate(grads, *target, dt)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Group;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_prob_minus_target() {
        let mut g = Graph::new();
        let z = g.variable(t(&[1, 3], &[0.3, -1.2, 2.0])).unwrap();
        let y = g.input(t(&[1, 3], &[0.0, 1.0, 0.0])).unwrap();
        let loss = g.cross_entropy(z, y).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut p = vec![0.3, -1.2, 2.0];
        kernels::softmax_in_place(&mut p);
        let dz = grads.node(z).unwrap().data();
        for j in 0..3 {
            let expect = p[j] - [0.0, 1.0, 0.0][j];
            assert!((dz[j] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut g = Graph::new();
        let z = g.variable(t(&[1, 2], &[0.5, -0.5])).unwrap();
        let teacher = g.softmax(z).unwrap();
        let cut = g.detach(teacher).unwrap();
        let loss = g.cross_entropy(z, cut).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.node(teacher).is_none());
        assert!(grads.node(z).is_some());
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut ps = ParameterSet::new();
        let w = ps.add("w", Group::Backbone(1), t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = ps.add("b", Group::MainClassifier, t(&[2], &[0.1, 0.2])).unwrap();
        ps.freeze_group(Group::Backbone(1));
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[1.0, -1.0])).unwrap();
        let wn = g.param(&ps, w).unwrap();
        let bn = g.param(&ps, b).unwrap();
        let z = g.linear(x, wn, bn).unwrap();
        let y = g.input(t(&[1, 2], &[1.0, 0.0])).unwrap();
        let loss = g.cross_entropy(z, y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(w).is_none());
        assert!(grads.param(b).is_some());
    }

    #[test]
    fn backward_on_unrecorded_node_fails() {
        let mut other = Graph::new();
        let ghost = other.variable(Tensor::scalar(1.0)).unwrap();
        let empty = Graph::new();
        assert!(empty.backward(ghost).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let z = g.variable(t(&[1, 2], &[0.0, 1.0])).unwrap();
        assert!(g.backward(z).is_err());
    }

    #[test]
    fn non_finite_values_are_an_error() {
        let mut g = Graph::new();
        let x = g.variable(t(&[1], &[f64::MAX])).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..40).map(|i| ((i * 7919) % 113) as f64 / 37.0 - 1.3).collect();
        let x = g.input(t(&[4, 10], &data)).unwrap();
        let y = g.layer_norm(x, None).unwrap();
        for row in g.value(y).rows() {
            let mean = row.iter().sum::<f64>() / 10.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut ps = ParameterSet::new();
        let w = ps.add("w", Group::Backbone(1), t(&[1], &[1.0])).unwrap();
        let mut g = Graph::inference();
        let n = g.param(&ps, w).unwrap();
        assert!(!g.requires_grad(n));
    }
}
