//! Central finite-difference checks against reverse-mode gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::nn::Module;
use crate::tensor::Tensor;

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor used so that near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Name (or index) of the worst entry.
    pub worst: String,
}

impl GradCheck {
    fn new() -> Self {
        Self { checked: 0, max_rel_err: 0.0, worst: String::new() }
    }

    fn record(&mut self, name: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_err(analytic, numeric, REL_FLOOR);
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = e.max(self.max_rel_err);
            self.worst = name();
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn check_input(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, analytic: &Tensor, eps: f64) -> Result<GradCheck> {
    let mut report = GradCheck::new();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe)?;
        probe[i] = orig - eps;
        let down = f(&probe)?;
        probe[i] = orig;
        report.record(|| alloc::format!("input[{i}]"), analytic[i], (up - down) / (2.0 * eps));
    }
    Ok(report)
}

fn perturb<M: Module>(model: &mut M, tensor: usize, elem: usize, value: Option<f64>) -> f64 {
    let mut seen = 0;
    let mut old = 0.0;
    model.visit_mut("", &mut |_, t| {
        if seen == tensor {
            old = t[elem];
            if let Some(v) = value {
                t[elem] = v;
            }
        }
        seen += 1;
    });
    old
}

/// Checks every element of every parameter of `model` (in visit order).
/// `analytic` holds one gradient tensor per visited parameter.
pub fn check_params<M: Module + Clone>(
    model: &M,
    f: impl Fn(&M) -> Result<f64>,
    analytic: &[Tensor],
    eps: f64,
) -> Result<GradCheck> {
    check_params_strided(model, f, analytic, eps, 1)
}

/// Like [`check_params`] but only elements `0, stride, 2 stride, ...` of
/// each parameter tensor.
pub fn check_params_strided<M: Module + Clone>(
    model: &M,
    f: impl Fn(&M) -> Result<f64>,
    analytic: &[Tensor],
    eps: f64,
    stride: usize,
) -> Result<GradCheck> {
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut work = model.clone();
    let mut report = GradCheck::new();
    for (ti, grad) in analytic.iter().enumerate() {
        for k in (0..grad.len()).step_by(stride.max(1)) {
            let orig = perturb(&mut work, ti, k, None);
            perturb(&mut work, ti, k, Some(orig + eps));
            let up = f(&work)?;
            perturb(&mut work, ti, k, Some(orig - eps));
            let down = f(&work)?;
            perturb(&mut work, ti, k, Some(orig));
            let name = &names[ti];
            report.record(|| alloc::format!("{name}[{k}]"), grad[k], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}
