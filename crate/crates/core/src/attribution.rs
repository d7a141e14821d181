//! Integrated-gradients attribution over dFNC inputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metrics::class_scores;
use crate::model::{FstMamba, Task};
use crate::tensor::Tensor;
use crate::topology::unpad;
use crate::train::Dataset;

/// Path points evaluated per forward/backward pass.
const PATH_CHUNK: usize = 8;

/// Attribution of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// Per-cell attributions `[N, N, T]` (padding dropped).
    pub values: Tensor,
    /// `values` averaged over windows, `[N, N]`.
    pub temporal_mean: Tensor,
    /// Output index whose value was attributed.
    pub target: usize,
    pub f_input: f64,
    pub f_baseline: f64,
    /// `|sum(IG) - (F(x) - F(x'))| / |F(x) - F(x')|` (absolute when the
    /// difference is zero).
    pub completeness_residual: f64,
}

/// Right Riemann sum of the gradient along the straight path from
/// `baseline` to `x`, times `x - baseline`.
///
/// `grad` receives a batch `[k, ...]` of path points and returns `dF/dx` for
/// each (same shape). The step index in errors is 1-based.
pub fn path_integral(
    x: &Tensor,
    baseline: &Tensor,
    m_steps: usize,
    grad: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    if x.shape() != baseline.shape() {
        return Err(Error::Shape(format!("baseline {:?} vs input {:?}", baseline.shape(), x.shape())));
    }
    if m_steps == 0 {
        return Err(Error::Config("integrated gradients need at least one step".into()));
    }
    let n = x.len();
    let mut acc = vec![0.0; n];
    let mut k = 1;
    while k <= m_steps {
        let count = PATH_CHUNK.min(m_steps + 1 - k);
        let mut points = Vec::with_capacity(count * n);
        for s in 0..count {
            let alpha = (k + s) as f64 / m_steps as f64;
            points.extend(x.data().iter().zip(baseline.data()).map(|(xi, bi)| bi + alpha * (xi - bi)));
        }
        let mut shape = vec![count];
        shape.extend_from_slice(x.shape());
        let g = grad(&Tensor::from_vec(&shape, points)?)?;
        if g.len() != count * n {
            return Err(Error::Shape(format!("gradient callback returned {} values for {} points", g.len(), count)));
        }
        for s in 0..count {
            let row = &g.data()[s * n..(s + 1) * n];
            if let Some(bad) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { location: format!("integrated gradients step {} (element {bad})", k + s) });
            }
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        k += count;
    }
    let ig = acc
        .iter()
        .zip(x.data().iter().zip(baseline.data()))
        .map(|(a, (xi, bi))| (xi - bi) * a / m_steps as f64)
        .collect();
    Tensor::from_vec(x.shape(), ig)
}

/// `dF/dx` for every sample of `batch` where `F` is output `target`.
pub fn output_gradient(model: &FstMamba, batch: &Tensor, target: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(batch.clone());
    let f = model.bind(&mut g, x)?;
    let out = g.value(f.output);
    let k = out.shape()[1];
    let mut seed = Tensor::zeros(out.shape());
    for r in 0..out.shape()[0] {
        seed[r * k + target] = 1.0;
    }
    let grads = g.backward_with(f.output, seed)?;
    Ok(grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(batch.shape())))
}

fn with_batch_axis(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape)
}

/// Integrated gradients of one padded sample `[N', N', T, 1]`.
///
/// `F` is the logit of `target` (default: the class predicted at `sample`)
/// for classification and the prediction for regression. The baseline
/// defaults to zeros.
pub fn integrated_gradients(
    model: &FstMamba,
    sample: &Tensor,
    baseline: Option<&Tensor>,
    m_steps: usize,
    target: Option<usize>,
) -> Result<AttributionMap> {
    let zeros = Tensor::zeros(sample.shape());
    let baseline = baseline.unwrap_or(&zeros);
    let ends = Tensor::stack(&[sample, baseline])?;
    let out = model.forward(&ends)?;
    let target = match (model.cfg.task, target) {
        (Task::Regression, _) => 0,
        (Task::BinaryClassification, Some(t)) if t < 2 => t,
        (Task::BinaryClassification, Some(t)) => {
            return Err(Error::Config(format!("target class {t} out of range")));
        }
        (Task::BinaryClassification, None) => class_scores(&out).1[0],
    };
    let k = out.shape()[1];
    let (f_input, f_baseline) = (out[target], out[k + target]);
    let ig = path_integral(sample, baseline, m_steps, &mut |points| output_gradient(model, points, target))?;
    let diff = f_input - f_baseline;
    let gap = (ig.sum() - diff).abs();
    let completeness_residual = if diff == 0.0 { gap } else { gap / diff.abs() };
    let s = sample.shape();
    let (p, t) = (s[0], s[2]);
    let n = model.cfg.atlas.n_components;
    let values = unpad(&ig.reshape(&[p, p, t])?, n)?;
    let temporal_mean = temporal_mean(&values)?;
    Ok(AttributionMap { values, temporal_mean, target, f_input, f_baseline, completeness_residual })
}

/// Mean over the last axis of `[N, N, T]`.
pub fn temporal_mean(values: &Tensor) -> Result<Tensor> {
    let s = values.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("temporal mean expects [N, N, T], got {s:?}")));
    }
    let (n, t) = (s[0], s[2]);
    let data = values.data().chunks(t).map(|c| c.iter().sum::<f64>() / t as f64).collect();
    Tensor::from_vec(&[n, n], data)
}

/// Cohort map: temporal-mean attributions averaged over the correctly
/// classified samples among `idx`, each attributed to its true class.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortAttribution {
    pub mean: Tensor,
    pub used: Vec<usize>,
    pub maps: Vec<AttributionMap>,
}

pub fn cohort_attribution(model: &FstMamba, data: &Dataset, idx: &[usize], m_steps: usize) -> Result<CohortAttribution> {
    if model.cfg.task != Task::BinaryClassification {
        return Err(Error::Config("cohort attribution filters by correct classification".into()));
    }
    let n = model.cfg.atlas.n_components;
    let mut mean = Tensor::zeros(&[n, n]);
    let mut used = Vec::new();
    let mut maps = Vec::new();
    for &i in idx {
        let x = data.sample(i);
        let label = data.targets[i] as usize;
        let out = model.forward(&with_batch_axis(&x)?)?;
        if class_scores(&out).1[0] != label {
            continue;
        }
        let map = integrated_gradients(model, &x, None, m_steps, Some(label))?;
        mean.add_assign(&map.temporal_mean);
        used.push(i);
        maps.push(map);
    }
    if !used.is_empty() {
        let c = used.len() as f64;
        mean = mean.map(|v| v / c);
    }
    Ok(CohortAttribution { mean, used, maps })
}

#[cfg(test)]
mod tests;
