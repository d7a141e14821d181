//! Parameter containers shared by every layer.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Visits named parameter tensors in a fixed order.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` over the last axis; `W` is `[in, out]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    /// Weights and bias uniform in `±1/sqrt(fan_in)`.
    pub fn init(input: usize, output: usize, rng: &mut impl rand::Rng) -> Self {
        let bound = 1.0 / crate::math::sqrt(input as f64);
        let weight = Tensor::from_fn(&[input, output], |_| bound * (2.0 * rng.random::<f64>() - 1.0));
        let bias = Tensor::from_fn(&[output], |_| bound * (2.0 * rng.random::<f64>() - 1.0));
        Self { weight, bias }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(&[input, output]), bias: Tensor::zeros(&[output]) }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Tensor::from_fn(&[dim, dim], |i| if i[0] == i[1] { 1.0 } else { 0.0 }),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Plain evaluation outside a graph.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (i, o) = (self.in_dim(), self.out_dim());
        let last = x.shape().last().copied().unwrap_or(0);
        if last != i {
            return Err(Error::Shape(format!("affine expects last axis {i}, got {:?}", x.shape())));
        }
        let rows = x.len() / i.max(1);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = o;
        let mut out = Tensor::zeros(&shape);
        affine_rows(x.data(), self.weight.data(), Some(self.bias.data()), rows, i, o, out.data_mut());
        Ok(out)
    }

    pub fn bind(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.affine(x, w, Some(b))
    }
}

impl Module for Affine {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub(crate) fn affine_rows(x: &[f64], w: &[f64], b: Option<&[f64]>, rows: usize, i: usize, o: usize, out: &mut [f64]) {
    for r in 0..rows {
        let xr = &x[r * i..(r + 1) * i];
        let yr = &mut out[r * o..(r + 1) * o];
        match b {
            Some(b) => yr.copy_from_slice(b),
            None => yr.iter_mut().for_each(|v| *v = 0.0),
        }
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[k * o..(k + 1) * o];
            for (y, &wv) in yr.iter_mut().zip(wr) {
                *y += xv * wv;
            }
        }
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Tensor::full(&[dim], 1.0), beta: Tensor::zeros(&[dim]) }
    }

    pub fn bind(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}
