//! Scan micro-benchmark: recurrent scan wall time against sequence length,
//! cross-checked against the convolution oracle.

use std::time::Instant;

use fstmamba_core::math;
use fstmamba_core::ssm::{discretize, selective_scan, ssm_conv_oracle, OrderingId, ScanSequenceBatch, SsmParams};
use fstmamba_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Lengths above this skip the quadratic oracle.
pub const ORACLE_MAX_LEN: usize = 1024;
/// Minimum measured time per length; short runs are repeated.
const MIN_SECONDS: f64 = 0.05;

pub const DEFAULT_LENGTHS: [usize; 7] = [256, 512, 1024, 2048, 4096, 8192, 16384];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub len: usize,
    /// Mean seconds per scan.
    pub seconds: f64,
    pub repeats: usize,
    /// Max-norm error relative to the oracle's max norm, when run.
    pub oracle_rel_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub state: usize,
    pub channels: usize,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log(time) on log(L); needs two lengths.
    pub slope: Option<f64>,
}

/// Time-invariant parameters so the oracle applies.
fn invariant_params(channels: usize, state: usize, rng: &mut ChaCha8Rng) -> SsmParams {
    let mut p = SsmParams::init(channels, state, rng);
    p.delta_proj.weight = Tensor::zeros(&[channels, channels]);
    p.b_proj.weight = Tensor::zeros(&[channels, state]);
    p.c_proj.weight = Tensor::zeros(&[channels, state]);
    p
}

fn oracle_error(x: &Tensor, y: &Tensor, p: &SsmParams) -> Result<f64> {
    let (l, e, n) = (x.shape()[1], p.inner_dim(), p.state_size());
    let a = p.a();
    let (mut diff, mut scale): (f64, f64) = (0.0, 0.0);
    for ei in 0..e {
        let delta = math::softplus(p.delta_proj.bias[ei]);
        let mut a_bar = vec![0.0; n];
        let mut b_bar = vec![0.0; n];
        for s in 0..n {
            (a_bar[s], b_bar[s]) = discretize(a[ei * n + s], p.b_proj.bias[s], delta)?;
        }
        let xs: Vec<f64> = (0..l).map(|t| x.get(&[0, t, ei])).collect();
        let want = ssm_conv_oracle(&xs, &a_bar, &b_bar, p.c_proj.bias.data(), p.d_skip[ei])?;
        for (t, w) in want.iter().enumerate() {
            let got = y.get(&[0, t, ei]);
            diff = diff.max((got - w).abs());
            scale = scale.max(w.abs());
        }
    }
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn bench_scan(lengths: &[usize], state: usize, channels: usize, seed: u64) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = invariant_params(channels, state, &mut rng);
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let x = Tensor::from_fn(&[1, len, channels], |_| rng.random_range(-1.0..1.0));
        let batch = ScanSequenceBatch::new(x.clone(), OrderingId::Forward)?;
        // warm-up run, also used for the oracle comparison
        let y = selective_scan(&batch, &p)?;
        let oracle_rel_err = if len <= ORACLE_MAX_LEN { Some(oracle_error(&x, &y, &p)?) } else { None };
        let mut repeats = 0;
        let t0 = Instant::now();
        while repeats == 0 || t0.elapsed().as_secs_f64() < MIN_SECONDS {
            std::hint::black_box(selective_scan(&batch, &p)?);
            repeats += 1;
        }
        let seconds = t0.elapsed().as_secs_f64() / repeats as f64;
        rows.push(BenchRow { len, seconds, repeats, oracle_rel_err });
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.len as f64, r.seconds)).collect();
    let slope = log_log_slope(&points);
    Ok(BenchReport { state, channels, rows, slope })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_laws() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 8.0, 64.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.5))).collect();
        assert!((log_log_slope(&pts).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(log_log_slope(&pts[..1]), None);
    }

    #[test]
    fn single_step_matches_oracle() {
        let r = bench_scan(&[1, 33], 16, 2, 0).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|row| row.oracle_rel_err.unwrap() < 1e-5));
    }
}
