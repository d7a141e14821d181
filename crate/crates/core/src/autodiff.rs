//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its value; [`Graph::backward`]
//! walks the tape once in reverse. Parameters are bound with
//! [`Graph::param`], keyed by the address of the borrowed tensor, so the
//! caller can look gradients up by the same tensor afterwards.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use crate::error::{dims, Error, Result};
use crate::math;
use crate::nn::{affine_rows, LN_EPS};
use crate::ssm::{scan_backward, scan_forward, ScanOperands};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

/// Index value that makes [`Graph::gather`] emit zero.
pub const GATHER_ZERO: usize = usize::MAX;

/// A fixed orthogonal linear map with an exact transpose.
pub trait OrthogonalMap: Debug {
    fn apply(&self, x: &Tensor, transpose: bool) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Silu,
    Softplus,
    /// `-exp(x)`
    NegExp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Unary(Var, Unary),
    Affine { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { x: Var, index: Vec<usize> },
    WeightedSumMid { x: Var, weights: Vec<f64>, outer: usize, inner: usize },
    MaskRows { x: Var, mask: Vec<f64> },
    GatedResidual { z: Var, yc: Var, yt: Var },
    CausalConv { x: Var, w: Var, b: Var },
    Scan { u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var },
    Orthogonal { x: Var, map: Box<dyn OrthogonalMap>, transpose: bool },
    SoftmaxCe { logits: Var, labels: Vec<usize> },
    Mse { pred: Var, targets: Vec<f64> },
    Sum(Var),
    Reshape(Var),
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
    params: BTreeMap<usize, Var>,
}

/// Gradients indexed by node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn key(t: &Tensor) -> usize {
    t as *const Tensor as usize
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: {} vs {}", dims(a), dims(b)))
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients (e.g. an input being attributed).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter tensor; binding the same tensor twice yields the same node.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&key(t)) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.insert(key(t), v);
        v
    }

    /// Gradient of a bound parameter, zeros if it never entered the graph.
    pub fn param_grad(&self, grads: &Grads, t: &Tensor) -> Tensor {
        self.params
            .get(&key(t))
            .and_then(|&v| grads.get(v))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()))
    }

    pub fn is_bound(&self, t: &Tensor) -> bool {
        self.params.contains_key(&key(t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("add", x.shape(), y.shape()));
        }
        let mut out = x.clone();
        out.add_assign(y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x + bias` where `bias` matches the trailing axes of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let k = bv.rank();
        if k > xv.rank() || xv.shape()[xv.rank() - k..] != *bv.shape() {
            return Err(mismatch("add_bias", xv.shape(), bv.shape()));
        }
        let m = bv.len();
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(m.max(1)) {
            for (o, b) in chunk.iter_mut().zip(bv.data()) {
                *o += *b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let out = self.value(x).map(|v| match f {
            Unary::Sigmoid => math::sigmoid(v),
            Unary::Silu => math::silu(v),
            Unary::Softplus => math::softplus(v),
            Unary::NegExp => -math::exp(v),
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary(x, f), rg)
    }

    /// `x W + b` over the last axis of `x`; `W` is `[in, out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.shape().last() != Some(&wv.shape()[0]) {
            return Err(mismatch("affine", xv.shape(), wv.shape()));
        }
        let (i, o) = (wv.shape()[0], wv.shape()[1]);
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(mismatch("affine bias", self.value(b).shape(), &[o]));
            }
        }
        let rows = xv.len() / i.max(1);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = o;
        let mut out = Tensor::zeros(&shape);
        affine_rows(xv.data(), wv.data(), b.map(|b| self.value(b).data()), rows, i, o, out.data_mut());
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Affine { x, w, b }, rg))
    }

    /// Normalizes over the last axis then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(mismatch("layer_norm", xv.shape(), self.value(gamma).shape()));
        }
        let rows = xv.len() / c.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(xv.shape());
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / math::sqrt(var + LN_EPS);
            rstd[r] = s;
            for k in 0..c {
                let h = (row[k] - mean) * s;
                xhat[r * c + k] = h;
                out[r * c + k] = gv[k] * h + bv[k];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::Shape(format!("gather: {} indices for shape {}", index.len(), dims(shape))));
        }
        if let Some(bad) = index.iter().find(|&&i| i != GATHER_ZERO && i >= xv.len()) {
            return Err(Error::Shape(format!("gather: index {bad} out of range {}", xv.len())));
        }
        let data = index.iter().map(|&i| if i == GATHER_ZERO { 0.0 } else { xv[i] }).collect();
        let out = Tensor::from_vec(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather { x, index }, rg))
    }

    /// Views `x` as `[outer, weights.len(), inner]` and contracts the middle axis.
    pub fn weighted_sum_mid(&mut self, x: Var, weights: Vec<f64>, outer: usize, inner: usize, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mid = weights.len();
        if outer * mid * inner != xv.len() || shape.iter().product::<usize>() != outer * inner {
            return Err(Error::Shape(format!(
                "weighted_sum_mid: {} as [{outer}, {mid}, {inner}] → {}",
                dims(xv.shape()),
                dims(shape)
            )));
        }
        let mut out = Tensor::zeros(shape);
        for o in 0..outer {
            for (m, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let src = &xv.data()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                let dst = &mut out.data_mut()[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::WeightedSumMid { x, weights, outer, inner }, rg))
    }

    /// Scales each row of the last axis by `mask[row]`.
    pub fn mask_rows(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.shape().last().copied().unwrap_or(1);
        if mask.len() * c != xv.len() {
            return Err(Error::Shape(format!("mask_rows: {} rows for {}", mask.len(), dims(xv.shape()))));
        }
        let mut out = xv.clone();
        for (row, &m) in out.data_mut().chunks_mut(c.max(1)).zip(&mask) {
            row.iter_mut().for_each(|v| *v *= m);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskRows { x, mask }, rg))
    }

    /// `z[b,i,j,t,c] + yc[b,i,j,c] · sigmoid(yt[b,t,c])`.
    pub fn gated_residual(&mut self, z: Var, yc: Var, yt: Var) -> Result<Var> {
        let (zs, cs, ts) = (self.value(z).shape(), self.value(yc).shape(), self.value(yt).shape());
        let ok = zs.len() == 5
            && cs == [zs[0], zs[1], zs[2], zs[4]]
            && ts == [zs[0], zs[3], zs[4]];
        if !ok {
            return Err(Error::Shape(format!(
                "gated_residual: z {} yc {} yt {}",
                dims(zs),
                dims(cs),
                dims(ts)
            )));
        }
        let (b, p, t, c) = (zs[0], zs[1] * zs[2], zs[3], zs[4]);
        let sig: Vec<f64> = self.value(yt).data().iter().map(|&v| math::sigmoid(v)).collect();
        let mut out = self.value(z).clone();
        let ycv = self.value(yc).data();
        let od = out.data_mut();
        for bi in 0..b {
            for pi in 0..p {
                let ycr = &ycv[(bi * p + pi) * c..(bi * p + pi + 1) * c];
                for ti in 0..t {
                    let sr = &sig[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                    let base = ((bi * p + pi) * t + ti) * c;
                    for k in 0..c {
                        od[base + k] += ycr[k] * sr[k];
                    }
                }
            }
        }
        let rg = self.rg(&[z, yc, yt]);
        Ok(self.push(out, Op::GatedResidual { z, yc, yt }, rg))
    }

    /// Depthwise causal convolution of `x: [q, l, e]` with `w: [e, k]`, bias `[e]`.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] || self.value(b).shape() != [xs[2]] {
            return Err(mismatch("causal_conv", xs, ws));
        }
        let (q, l, e, k) = (xs[0], xs[1], xs[2], ws[1]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Tensor::zeros(xs);
        let od = out.data_mut();
        for qi in 0..q {
            for t in 0..l {
                for ei in 0..e {
                    let mut acc = bv[ei];
                    for kk in 0..k {
                        let src = t as isize + kk as isize - (k as isize - 1);
                        if src >= 0 {
                            acc += wv[ei * k + kk] * xv[(qi * l + src as usize) * e + ei];
                        }
                    }
                    od[(qi * l + t) * e + ei] = acc;
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::CausalConv { x, w, b }, rg))
    }

    /// Selective scan: `u, delta: [q, l, e]`, `a: [e, n]`, `b, c: [q, l, n]`, `d: [e]`.
    pub fn scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let ops = self.scan_operands(u, delta, a, b, c, d)?;
        let y = scan_forward(&ops)?;
        let out = Tensor::from_vec(self.value(u).shape(), y)?;
        let rg = self.rg(&[u, delta, a, b, c, d]);
        Ok(self.push(out, Op::Scan { u, delta, a, b, c, d }, rg))
    }

    fn scan_operands(&self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<ScanOperands<'_>> {
        let us = self.value(u).shape();
        let as_ = self.value(a).shape();
        if us.len() != 3 || as_.len() != 2 {
            return Err(mismatch("scan", us, as_));
        }
        Ok(ScanOperands {
            q: us[0],
            l: us[1],
            e: us[2],
            n: as_[1],
            u: self.value(u).data(),
            delta: self.value(delta).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d: self.value(d).data(),
        })
    }

    /// Applies a fixed orthogonal map (or its transpose).
    pub fn orthogonal(&mut self, x: Var, map: Box<dyn OrthogonalMap>, transpose: bool) -> Result<Var> {
        let out = map.apply(self.value(x), transpose)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Orthogonal { x, map, transpose }, rg))
    }

    /// Mean softmax cross-entropy of `logits: [batch, classes]`.
    pub fn softmax_ce(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::Shape(format!("softmax_ce: logits {} for {} labels", dims(lv.shape()), labels.len())));
        }
        let k = lv.shape()[1];
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Shape(format!("softmax_ce: label {bad} with {k} classes")));
        }
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv.data()[r * k..(r + 1) * k];
            loss += log_sum_exp(row) - row[y];
        }
        loss /= labels.len().max(1) as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, labels }, rg))
    }

    /// Mean squared error against `targets` (one per element of `pred`).
    pub fn mse(&mut self, pred: Var, targets: Vec<f64>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != targets.len() {
            return Err(Error::Shape(format!("mse: {} predictions for {} targets", pv.len(), targets.len())));
        }
        let loss = pv.data().iter().zip(&targets).map(|(p, y)| (p - y) * (p - y)).sum::<f64>()
            / targets.len().max(1) as f64;
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, targets }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Grads> {
        let seed = Tensor::full(self.value(output).shape(), 1.0);
        self.backward_with(output, seed)
    }

    /// Backpropagates `seed` (the adjoint of `output`).
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Grads> {
        if seed.shape() != self.value(output).shape() {
            return Err(mismatch("backward seed", seed.shape(), self.value(output).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds `f(i)` into the gradient of `v` elementwise without allocating twice.
    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let acc = slot.get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        for (i, a) in acc.data_mut().iter_mut().enumerate() {
            *a += f(i);
        }
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, gy.clone());
                if self.nodes[bias.0].requires_grad {
                    let m = self.value(*bias).len();
                    let mut gb = Tensor::zeros(self.value(*bias).shape());
                    for chunk in g.chunks(m.max(1)) {
                        for (o, v) in gb.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |i| g[i] * bv[i]);
                self.accumulate_with(grads, *b, |i| g[i] * av[i]);
            }
            Op::Unary(x, f) => {
                let xv = self.value(*x).data();
                let y = node.value.data();
                let f = *f;
                self.accumulate_with(grads, *x, |i| {
                    let d = match f {
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Silu => math::silu_grad(xv[i]),
                        Unary::Softplus => math::sigmoid(xv[i]),
                        Unary::NegExp => y[i],
                    };
                    g[i] * d
                });
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (i, o) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / i.max(1);
                if self.nodes[x.0].requires_grad {
                    let mut gx = Tensor::zeros(xv.shape());
                    let gxd = gx.data_mut();
                    for r in 0..rows {
                        let gr = &g[r * o..(r + 1) * o];
                        for k in 0..i {
                            let wr = &wv.data()[k * o..(k + 1) * o];
                            gxd[r * i + k] = gr.iter().zip(wr).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.nodes[w.0].requires_grad {
                    let mut gw = Tensor::zeros(wv.shape());
                    let gwd = gw.data_mut();
                    for r in 0..rows {
                        let gr = &g[r * o..(r + 1) * o];
                        for k in 0..i {
                            let xvk = xv[r * i + k];
                            if xvk == 0.0 {
                                continue;
                            }
                            for (d, &gv) in gwd[k * o..(k + 1) * o].iter_mut().zip(gr) {
                                *d += xvk * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.nodes[b.0].requires_grad {
                        let mut gb = Tensor::zeros(&[o]);
                        for r in 0..rows {
                            for (d, v) in gb.data_mut().iter_mut().zip(&g[r * o..(r + 1) * o]) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, gb);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                let rows = rstd.len();
                let mut gg = Tensor::zeros(&[c]);
                let mut gbeta = Tensor::zeros(&[c]);
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for r in 0..rows {
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for k in 0..c {
                        let j = r * c + k;
                        gg[k] += g[j] * xhat[j];
                        gbeta[k] += g[j];
                        let gh = g[j] * gam[k];
                        mean_g += gh;
                        mean_gx += gh * xhat[j];
                    }
                    mean_g /= c as f64;
                    mean_gx /= c as f64;
                    for k in 0..c {
                        let j = r * c + k;
                        gx[j] = rstd[r] * (g[j] * gam[k] - mean_g - xhat[j] * mean_gx);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gbeta);
            }
            Op::Gather { x, index } => {
                if self.nodes[x.0].requires_grad {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (o, &i) in index.iter().enumerate() {
                        if i != GATHER_ZERO {
                            gx[i] += g[o];
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::WeightedSumMid { x, weights, outer, inner } => {
                if self.nodes[x.0].requires_grad {
                    let (mid, inner) = (weights.len(), *inner);
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let gxd = gx.data_mut();
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for (m, &w) in weights.iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            let dst = &mut gxd[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = w * s;
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::MaskRows { x, mask } => {
                if self.nodes[x.0].requires_grad {
                    let c = node.value.shape().last().copied().unwrap_or(1).max(1);
                    let mut gx = gy.clone();
                    for (row, &m) in gx.data_mut().chunks_mut(c).zip(mask) {
                        row.iter_mut().for_each(|v| *v *= m);
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::GatedResidual { z, yc, yt } => {
                self.accumulate(grads, *z, gy.clone());
                let zs = self.value(*z).shape();
                let (b, p, t, c) = (zs[0], zs[1] * zs[2], zs[3], zs[4]);
                let ytv = self.value(*yt).data();
                let ycv = self.value(*yc).data();
                let sig: Vec<f64> = ytv.iter().map(|&v| math::sigmoid(v)).collect();
                let mut gyc = Tensor::zeros(self.value(*yc).shape());
                let mut gyt = Tensor::zeros(self.value(*yt).shape());
                for bi in 0..b {
                    for pi in 0..p {
                        let crow = (bi * p + pi) * c;
                        for ti in 0..t {
                            let trow = (bi * t + ti) * c;
                            let base = ((bi * p + pi) * t + ti) * c;
                            for k in 0..c {
                                let gv = g[base + k];
                                gyc[crow + k] += gv * sig[trow + k];
                                gyt[trow + k] += gv * ycv[crow + k];
                            }
                        }
                    }
                }
                for (v, s) in gyt.data_mut().iter_mut().zip(&sig) {
                    *v *= s * (1.0 - s);
                }
                self.accumulate(grads, *yc, gyc);
                self.accumulate(grads, *yt, gyt);
            }
            Op::CausalConv { x, w, b } => {
                let xs = self.value(*x).shape();
                let (q, l, e) = (xs[0], xs[1], xs[2]);
                let k = self.value(*w).shape()[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut gx = Tensor::zeros(xs);
                let mut gw = Tensor::zeros(self.value(*w).shape());
                let mut gb = Tensor::zeros(&[e]);
                for qi in 0..q {
                    for t in 0..l {
                        for ei in 0..e {
                            let gv = g[(qi * l + t) * e + ei];
                            gb[ei] += gv;
                            for kk in 0..k {
                                let src = t as isize + kk as isize - (k as isize - 1);
                                if src >= 0 {
                                    let si = (qi * l + src as usize) * e + ei;
                                    gx[si] += wv[ei * k + kk] * gv;
                                    gw[ei * k + kk] += xv[si] * gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *b, gb);
            }
            Op::Scan { u, delta, a, b, c, d } => {
                let ops = self.scan_operands(*u, *delta, *a, *b, *c, *d)?;
                let sg = scan_backward(&ops, g)?;
                for (v, data) in [(*u, sg.u), (*delta, sg.delta), (*a, sg.a), (*b, sg.b), (*c, sg.c), (*d, sg.d)] {
                    let t = Tensor::from_vec(self.value(v).shape(), data)?;
                    self.accumulate(grads, v, t);
                }
            }
            Op::Orthogonal { x, map, transpose } => {
                if self.nodes[x.0].requires_grad {
                    let gx = map.apply(gy, !*transpose)?;
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::SoftmaxCe { logits, labels } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let scale = g[0] / labels.len().max(1) as f64;
                let mut gl = Tensor::zeros(lv.shape());
                for (r, &y) in labels.iter().enumerate() {
                    let row = &lv.data()[r * k..(r + 1) * k];
                    let lse = log_sum_exp(row);
                    for j in 0..k {
                        let p = math::exp(row[j] - lse);
                        gl[r * k + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::Mse { pred, targets } => {
                let pv = self.value(*pred).data();
                let scale = 2.0 * g[0] / targets.len().max(1) as f64;
                self.accumulate_with(grads, *pred, |i| scale * (pv[i] - targets[i]));
            }
            Op::Sum(x) => {
                let s = g[0];
                self.accumulate_with(grads, *x, |_| s);
            }
            Op::Reshape(x) => {
                let gx = gy.clone().reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + math::ln(row.iter().map(|v| math::exp(v - m)).sum())
}

#[cfg(test)]
mod tests;
