//! Sliding-window connectivity and a synthetic cohort generator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;
use crate::topology::ComponentAtlas;

/// Below this centered sum of squares a signal counts as constant.
pub const VARIANCE_EPS: f64 = 1e-12;

/// Component signals `[S, T_total, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentTimeSeries {
    pub data: Tensor,
    pub tr_seconds: f64,
}

impl ComponentTimeSeries {
    pub fn new(data: Tensor, tr_seconds: f64) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Shape(format!("time series must be [S, T, N], got {:?}", data.shape())));
        }
        Ok(Self { data, tr_seconds })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }
}

/// Number of windows of length `window` at `stride` over `total` samples.
pub fn window_count(total: usize, window: usize, stride: usize) -> usize {
    if window > total || stride == 0 {
        0
    } else {
        (total - window) / stride + 1
    }
}

/// Pearson correlation per window: `[S, T_total, N] → [S, N, N, T]`.
pub fn sliding_window_dfnc(ts: &ComponentTimeSeries, window: usize, stride: usize) -> Result<Tensor> {
    let (s, total, n) = ts.dims();
    if window < 3 {
        return Err(Error::Config(format!("window must be at least 3 samples, got {window}")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    if window > total {
        return Err(Error::Config(format!("window {window} exceeds series length {total}")));
    }
    let windows = window_count(total, window, stride);
    let mut out = Tensor::zeros(&[s, n, n, windows]);
    let mut centered = vec![0.0; n * window];
    let mut norms = vec![0.0; n];
    let src = ts.data.data();
    let od = out.data_mut();
    for si in 0..s {
        for w in 0..windows {
            let start = w * stride;
            for c in 0..n {
                let mut mean = 0.0;
                for t in 0..window {
                    mean += src[(si * total + start + t) * n + c];
                }
                mean /= window as f64;
                let mut ss = 0.0;
                for t in 0..window {
                    let v = src[(si * total + start + t) * n + c] - mean;
                    centered[c * window + t] = v;
                    ss += v * v;
                }
                norms[c] = ss;
            }
            for i in 0..n {
                od[((si * n + i) * n + i) * windows + w] = 1.0;
                for j in i + 1..n {
                    let r = if norms[i] < VARIANCE_EPS || norms[j] < VARIANCE_EPS {
                        0.0
                    } else {
                        let dot: f64 = centered[i * window..(i + 1) * window]
                            .iter()
                            .zip(&centered[j * window..(j + 1) * window])
                            .map(|(a, b)| a * b)
                            .sum();
                        (dot / math::sqrt(norms[i] * norms[j])).clamp(-1.0, 1.0)
                    };
                    od[((si * n + i) * n + j) * windows + w] = r;
                    od[((si * n + j) * n + i) * windows + w] = r;
                }
            }
        }
    }
    Ok(out)
}

/// Class-conditional correlation between two networks' signals.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CouplingEffect {
    pub class: usize,
    pub network_a: usize,
    pub network_b: usize,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticCohortSpec {
    pub n_subjects: usize,
    pub n_components: usize,
    pub n_networks: usize,
    pub t_total: usize,
    pub window: usize,
    pub class_count: usize,
    pub effects: Vec<CouplingEffect>,
    pub ar_coefficient: f64,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "default_tr")]
    pub tr_seconds: f64,
}

fn default_tr() -> f64 {
    3.0
}

impl SyntheticCohortSpec {
    /// Target correlation between network signals for `class`.
    pub fn network_correlation(&self, class: usize) -> Result<Vec<f64>> {
        let k = self.n_networks;
        let mut r = vec![0.0; k * k];
        for i in 0..k {
            r[i * k + i] = 1.0;
        }
        for e in self.effects.iter().filter(|e| e.class == class) {
            r[e.network_a * k + e.network_b] += e.offset;
            r[e.network_b * k + e.network_a] += e.offset;
        }
        for i in 0..k {
            for j in 0..k {
                if i != j && !(r[i * k + j].abs() < 1.0) {
                    return Err(Error::Spec(format!(
                        "class {class}: target correlation {} between networks {i} and {j} is not in (-1, 1)",
                        r[i * k + j]
                    )));
                }
            }
        }
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive".into());
        }
        if self.n_networks == 0 || self.n_networks > self.n_components {
            return bad(format!("cannot split {} components into {} networks", self.n_components, self.n_networks));
        }
        if self.window < 3 || self.window > self.t_total {
            return bad(format!("window {} must be in [3, T_total = {}]", self.window, self.t_total));
        }
        if self.class_count == 0 {
            return bad("class_count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) {
            return bad(format!("ar_coefficient {} not in [0, 1)", self.ar_coefficient));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        for e in &self.effects {
            if e.class >= self.class_count || e.network_a >= self.n_networks || e.network_b >= self.n_networks {
                return bad(format!("effect {e:?} refers to a class or network out of range"));
            }
            if e.network_a == e.network_b {
                return bad(format!("effect {e:?} couples a network with itself"));
            }
            if !e.offset.is_finite() {
                return bad(format!("effect {e:?} has a non-finite offset"));
            }
        }
        for c in 0..self.class_count {
            let r = self.network_correlation(c)?;
            cholesky(&r, self.n_networks).ok_or_else(|| {
                Error::Spec(format!("class {c}: network correlation matrix is not positive definite"))
            })?;
        }
        Ok(())
    }
}

/// Lower-triangular `L` with `L Lᵀ = a` (row-major `k × k`), if `a` is positive definite.
pub fn cholesky(a: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * k + i] = math::sqrt(s);
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Some(l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub series: ComponentTimeSeries,
    pub labels: Vec<usize>,
    pub atlas: ComponentAtlas,
}

/// AR(1) network signals mixed to the class' target correlation, copied to
/// every component of the network, plus white noise.
pub fn generate_synthetic_cohort(spec: &SyntheticCohortSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let atlas = ComponentAtlas::uniform(spec.n_components, spec.n_networks)?;
    let network_of = atlas.network_of();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut labels: Vec<usize> = (0..spec.n_subjects).map(|i| i % spec.class_count).collect();
    labels.shuffle(&mut rng);

    let k = spec.n_networks;
    let factors = (0..spec.class_count)
        .map(|c| Ok(cholesky(&spec.network_correlation(c)?, k).expect("validated")))
        .collect::<Result<Vec<_>>>()?;

    let (t_total, n) = (spec.t_total, spec.n_components);
    let phi = spec.ar_coefficient;
    let innovation = math::sqrt(1.0 - phi * phi);
    let mut data = Tensor::zeros(&[spec.n_subjects, t_total, n]);
    let mut latent = vec![0.0; k * t_total];
    let mut mixed = vec![0.0; k];
    for (s, &label) in labels.iter().enumerate() {
        for net in 0..k {
            let mut prev: f64 = rng.sample(StandardNormal);
            for t in 0..t_total {
                if t > 0 {
                    let eta: f64 = rng.sample(StandardNormal);
                    prev = phi * prev + innovation * eta;
                }
                latent[net * t_total + t] = prev;
            }
        }
        let l = &factors[label];
        let row = data.data_mut();
        for t in 0..t_total {
            for (i, m) in mixed.iter_mut().enumerate() {
                *m = (0..=i).map(|j| l[i * k + j] * latent[j * t_total + t]).sum();
            }
            for c in 0..n {
                let noise: f64 = rng.sample(StandardNormal);
                row[(s * t_total + t) * n + c] = mixed[network_of[c]] + spec.noise_std * noise;
            }
        }
    }
    Ok(SyntheticCohort { series: ComponentTimeSeries::new(data, spec.tr_seconds)?, labels, atlas })
}
