//! The invariant suite behind `fstmamba check`.

use std::time::Instant;

use fstmamba_core::autodiff::{Graph, Unary, Var};
use fstmamba_core::dfnc::{sliding_window_dfnc, ComponentTimeSeries};
use fstmamba_core::gradcheck::{check_input, check_params_strided, rel_err};
use fstmamba_core::math;
use fstmamba_core::model::{collect_param_grads, FstMamba, ModelConfig, Task};
use fstmamba_core::rope::{reflection, rotation, stage_rope, stage_unrope, symrope_apply, RopeConfig};
use fstmamba_core::ssm::{discretize, selective_scan, ssm_conv_oracle, OrderingId, ScanSequenceBatch, SsmParams};
use fstmamba_core::topology::{component_merge, cva, cva_scatter, cvr, ComponentAtlas, MergeLayer};
use fstmamba_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Deliberate corruptions used to confirm that checks can fail.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// Scatter CVA groups back with a stride one larger than the gather.
    pub cva_stride: bool,
}

impl Faults {
    pub const NAMES: [&'static str; 1] = ["cva-stride"];

    pub fn enable(&mut self, name: &str) -> Option<()> {
        match name {
            "cva-stride" => self.cva_stride = true,
            _ => return None,
        }
        Some(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst measured error (or ratio) against `tolerance`.
    pub measured: f64,
    pub tolerance: String,
    pub detail: String,
    pub seconds: f64,
}

type CheckFn = fn(&Faults) -> Result<(bool, f64, String)>;

const CHECKS: &[(&str, &str, CheckFn)] = &[
    ("scan-vs-conv-oracle", "rel < 1e-5", scan_oracle),
    ("zoh-order", "ratio 4 +/- 0.8", zoh_order),
    ("cva-round-trip", "bit-identical", cva_round_trip),
    ("cvr-round-trip", "bit-identical", cvr_round_trip),
    ("merge-trace", "56-28-14-7, 24-48-96-192", merge_trace),
    ("rope-orthogonal-involution", "abs < 1e-12", rope_blocks),
    ("rope-relative-position", "abs < 1e-12", rope_relative),
    ("stage-unrope-inverse", "abs < 1e-12", rope_inverse),
    ("dfnc-pearson-oracle", "abs < 1e-12", dfnc_oracle),
    ("op-gradients", "rel < 1e-4", op_gradients),
    ("model-gradients", "rel < 1e-4", model_gradients),
];

pub fn names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs every check (or those whose name contains `filter`).
pub fn run(faults: &Faults, filter: Option<&str>) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .filter(|(name, ..)| filter.is_none_or(|f| name.contains(f)))
        .map(|(name, tol, f)| {
            let t0 = Instant::now();
            let (passed, measured, detail) = match f(faults) {
                Ok(r) => r,
                Err(e) => (false, f64::NAN, format!("error: {e}")),
            };
            CheckResult {
                name: (*name).into(),
                passed,
                measured,
                tolerance: (*tol).into(),
                detail,
                seconds: t0.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn scan_oracle(_: &Faults) -> Result<(bool, f64, String)> {
    let mut r = rng(1);
    let (e, n) = (3, 16);
    let mut worst: f64 = 0.0;
    for l in [1usize, 2, 31, 64] {
        let mut p = SsmParams::init(e, n, &mut r);
        p.delta_proj.weight = Tensor::zeros(&[e, e]);
        p.b_proj.weight = Tensor::zeros(&[e, n]);
        p.c_proj.weight = Tensor::zeros(&[e, n]);
        let x = random(&[2, l, e], &mut r);
        let y = selective_scan(&ScanSequenceBatch::new(x.clone(), OrderingId::Forward)?, &p)?;
        let a = p.a();
        for ei in 0..e {
            let delta = math::softplus(p.delta_proj.bias[ei]);
            let mut a_bar = vec![0.0; n];
            let mut b_bar = vec![0.0; n];
            for s in 0..n {
                (a_bar[s], b_bar[s]) = discretize(a[ei * n + s], p.b_proj.bias[s], delta)?;
            }
            for q in 0..2 {
                let xs: Vec<f64> = (0..l).map(|t| x.get(&[q, t, ei])).collect();
                let o = ssm_conv_oracle(&xs, &a_bar, &b_bar, p.c_proj.bias.data(), p.d_skip[ei])?;
                for t in 0..l {
                    worst = worst.max(rel_err(y.get(&[q, t, ei]), o[t], 1e-9));
                }
            }
        }
    }
    Ok((worst < 1e-5, worst, "L in {1, 2, 31, 64}, state 16".into()))
}

fn zoh_order(_: &Faults) -> Result<(bool, f64, String)> {
    let a = -0.7;
    let err = |d: f64| -> Result<f64> { Ok((discretize(a, 1.0, d)?.0 - (1.0 + d * a)).abs()) };
    let mut worst: f64 = 0.0;
    let mut d = 1e-1;
    while d > 2e-4 {
        let ratio = err(d)? / err(d / 2.0)?;
        worst = worst.max((ratio - 4.0).abs());
        d /= 2.0;
    }
    Ok((worst <= 0.8, worst, "max |ratio - 4| for delta halving from 1e-1 to 1e-4".into()))
}

fn cva_round_trip(faults: &Faults) -> Result<(bool, f64, String)> {
    let mut r = rng(3);
    let mut failures = 0;
    for (n, s) in [(8usize, 2usize), (8, 4), (56, 4)] {
        for _ in 0..100 {
            let x = random(&[1, n, n, 2, 3], &mut r);
            let groups = cva(&x, s)?;
            let scatter_step = if faults.cva_stride { s + 1 } else { s };
            let ok = match cva_scatter(&groups, &x, scatter_step) {
                Ok(back) => back == x,
                Err(_) => false,
            };
            failures += usize::from(!ok);
        }
    }
    Ok((failures == 0, failures as f64, format!("{failures} of 300 round trips differ")))
}

fn cvr_round_trip(_: &Faults) -> Result<(bool, f64, String)> {
    let mut r = rng(4);
    let mut failures = 0;
    for n in [8usize, 56] {
        for _ in 0..100 {
            let x = random(&[1, n, n, 2, 1], &mut r);
            let shift = r.random_range(-(n as i64)..=n as i64);
            failures += usize::from(cvr(&cvr(&x, shift)?, -shift)? != x);
        }
    }
    Ok((failures == 0, failures as f64, format!("{failures} of 200 round trips differ")))
}

fn merge_trace(_: &Faults) -> Result<(bool, f64, String)> {
    let mut r = rng(5);
    let mut z = random(&[1, 56, 56, 1, 24], &mut r);
    let mut trace = vec![(56, 24)];
    for _ in 0..3 {
        let c = z.shape()[4];
        z = component_merge(&z, &MergeLayer::init(c, &mut r))?;
        trace.push((z.shape()[1], z.shape()[4]));
    }
    let ok = trace == [(56, 24), (28, 48), (14, 96), (7, 192)];
    Ok((ok, 0.0, format!("{trace:?}")))
}

fn rope_blocks(_: &Faults) -> Result<(bool, f64, String)> {
    let mut r = rng(6);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = r.random_range(-50.0..50.0);
        for (m, involutive) in [(reflection(a), true), (rotation(a), false)] {
            // M^T M = I
            for i in 0..2 {
                for j in 0..2 {
                    let mtm = m[0][i] * m[0][j] + m[1][i] * m[1][j];
                    worst = worst.max((mtm - f64::from(u8::from(i == j))).abs());
                    if involutive {
                        let mm = m[i][0] * m[0][j] + m[i][1] * m[1][j];
                        worst = worst.max((mm - f64::from(u8::from(i == j))).abs());
                    }
                }
            }
        }
    }
    Ok((worst < 1e-12, worst, "1000 random angles".into()))
}

fn rope_relative(_: &Faults) -> Result<(bool, f64, String)> {
    // <R(m) q, R(n) k> = <q, R(n - m) k> on one rotation pair
    let mut r = rng(7);
    let mut worst: f64 = 0.0;
    let apply = |m: [[f64; 2]; 2], v: [f64; 2]| [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]];
    for _ in 0..1000 {
        let q = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let k = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let theta = r.random_range(0.0..1.0);
        let (m, n) = (r.random_range(0..64) as f64, r.random_range(0..64) as f64);
        let lhs = {
            let a = apply(rotation(m * theta), q);
            let b = apply(rotation(n * theta), k);
            a[0] * b[0] + a[1] * b[1]
        };
        let b = apply(rotation((n - m) * theta), k);
        worst = worst.max((lhs - (q[0] * b[0] + q[1] * b[1])).abs());
    }
    Ok((worst < 1e-12, worst, "1000 random vector pairs".into()))
}

fn rope_inverse(_: &Faults) -> Result<(bool, f64, String)> {
    let mut r = rng(8);
    let z = random(&[2, 6, 6, 5, 8], &mut r);
    let cfg = RopeConfig::new(8);
    let back = stage_unrope(&stage_rope(&z, &cfg)?, &cfg)?;
    let sym = symrope_apply(&symrope_apply(&z, &cfg, false)?, &cfg, false)?;
    let worst = back.max_abs_diff(&z).max(sym.max_abs_diff(&z));
    Ok((worst < 1e-12, worst, "unrope after rope, and symrope applied twice".into()))
}

fn dfnc_oracle(_: &Faults) -> Result<(bool, f64, String)> {
    let mut r = rng(9);
    let (s, t, n, w, stride) = (2, 40, 6, 10, 3);
    let ts = random(&[s, t, n], &mut r);
    let out = sliding_window_dfnc(&ComponentTimeSeries::new(ts.clone(), 1.0)?, w, stride)?;
    let windows = out.shape()[3];
    let mut worst: f64 = 0.0;
    for si in 0..s {
        for k in 0..windows {
            let t0 = k * stride;
            for i in 0..n {
                for j in 0..n {
                    let xi: Vec<f64> = (t0..t0 + w).map(|u| ts.get(&[si, u, i])).collect();
                    let xj: Vec<f64> = (t0..t0 + w).map(|u| ts.get(&[si, u, j])).collect();
                    let (mi, mj) = (xi.iter().sum::<f64>() / w as f64, xj.iter().sum::<f64>() / w as f64);
                    let mut num = 0.0;
                    let (mut vi, mut vj) = (0.0, 0.0);
                    for u in 0..w {
                        num += (xi[u] - mi) * (xj[u] - mj);
                        vi += (xi[u] - mi) * (xi[u] - mi);
                        vj += (xj[u] - mj) * (xj[u] - mj);
                    }
                    let want = if i == j { 1.0 } else { num / (vi * vj).sqrt() };
                    worst = worst.max((out.get(&[si, i, j, k]) - want).abs());
                }
            }
        }
    }
    let ok = worst < 1e-12 && dfnc_invariants(&out).is_none();
    Ok((ok, worst, format!("{windows} windows per subject")))
}

/// First violation of symmetry, unit diagonal or range in `[S, N, N, T]`.
pub fn dfnc_invariants(x: &Tensor) -> Option<String> {
    let s = x.shape();
    if s.len() != 4 || s[1] != s[2] {
        return Some(format!("shape {s:?} is not [S, N, N, T]"));
    }
    let (n, t) = (s[1], s[3]);
    for si in 0..s[0] {
        for i in 0..n {
            for j in 0..n {
                for k in 0..t {
                    let v = x.get(&[si, i, j, k]);
                    if !(-1.0..=1.0).contains(&v) {
                        return Some(format!("entry ({si}, {i}, {j}, {k}) = {v} outside [-1, 1]"));
                    }
                    if i == j && v != 1.0 {
                        return Some(format!("diagonal ({si}, {i}, {k}) = {v}"));
                    }
                    if v != x.get(&[si, j, i, k]) {
                        return Some(format!("asymmetric at ({si}, {i}, {j}, {k})"));
                    }
                }
            }
        }
    }
    None
}

fn square(g: &mut Graph, x: Var) -> Result<Var> {
    g.mul(x, x)
}

fn grad_of(build: &dyn Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = build(&mut g, v)?;
    let loss = g.sum(out);
    let grads = g.backward(loss)?;
    Ok((g.value(loss)[0], grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))))
}

fn op_gradients(_: &Faults) -> Result<(bool, f64, String)> {
    let mut r = rng(10);
    let w = random(&[3, 4], &mut r);
    let bias = random(&[4], &mut r);
    let conv_w = random(&[3, 4], &mut r);
    let conv_b = random(&[3], &mut r);
    let weights = random(&[5, 3], &mut r);
    let gz = random(&[1, 2, 2, 3, 2], &mut r);
    let gc = random(&[1, 2, 2, 2], &mut r);
    let gt = random(&[1, 3, 2], &mut r);
    let ops: Vec<(&str, Vec<usize>, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>)> = vec![
        ("affine", vec![2, 5, 3], Box::new(|g, x| {
            let (w, b) = (g.constant(w.clone()), g.constant(bias.clone()));
            let y = g.affine(x, w, Some(b))?;
            square(g, y)
        })),
        ("layer_norm", vec![5, 3], Box::new(|g, x| {
            let (ga, be) = (g.constant(Tensor::full(&[3], 1.3)), g.constant(Tensor::full(&[3], 0.2)));
            let y = g.layer_norm(x, ga, be)?;
            let k = g.constant(weights.clone());
            g.mul(y, k)
        })),
        ("silu", vec![6], Box::new(|g, x| {
            let y = g.unary(x, Unary::Silu);
            square(g, y)
        })),
        ("causal_conv", vec![2, 5, 3], Box::new(|g, x| {
            let (w, b) = (g.constant(conv_w.clone()), g.constant(conv_b.clone()));
            let y = g.causal_conv(x, w, b)?;
            square(g, y)
        })),
        ("gated_residual/yc", vec![1, 2, 2, 2], Box::new(|g, yc| {
            let z = g.constant(gz.clone());
            let yt = g.constant(gt.clone());
            let out = g.gated_residual(z, yc, yt)?;
            square(g, out)
        })),
        ("gated_residual/yt", vec![1, 3, 2], Box::new(|g, yt| {
            let z = g.constant(gz.clone());
            let yc = g.constant(gc.clone());
            let out = g.gated_residual(z, yc, yt)?;
            square(g, out)
        })),
        ("softmax_ce", vec![4, 2], Box::new(|g, x| g.softmax_ce(x, vec![0, 1, 1, 0]))),
    ];
    let mut worst: f64 = 0.0;
    let mut names = Vec::new();
    for (name, shape, build) in &ops {
        let x = random(shape, &mut r);
        let (_, analytic) = match grad_of(build.as_ref(), &x) {
            Ok(v) => v,
            Err(e) => return Ok((false, f64::NAN, format!("{name}: {e}"))),
        };
        let report = check_input(|t| Ok(grad_of(build.as_ref(), t)?.0), &x, &analytic, 1e-5)?;
        worst = worst.max(report.max_rel_err);
        names.push(*name);
    }
    Ok((worst < 1e-4, worst, format!("ops: {}", names.join(", "))))
}

fn model_gradients(_: &Faults) -> Result<(bool, f64, String)> {
    let atlas = ComponentAtlas::uniform(7, 2)?;
    let mut cfg = ModelConfig::small(atlas, 8, &[2, 2], &[2, 1], Task::BinaryClassification, 3)?;
    cfg.encoder.state_size = 4;
    let model = FstMamba::new(cfg)?;
    let mut r = rng(11);
    let x = Tensor::from_fn(&[2, 8, 8, 2, 1], |i| if i[1] < 7 && i[2] < 7 { r.random_range(-1.0..1.0) } else { 0.0 });
    let labels = vec![0, 1];
    let loss = |m: &FstMamba| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let f = m.bind(&mut g, v)?;
        let l = g.softmax_ce(f.output, labels.clone())?;
        Ok(g.value(l)[0])
    };
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let f = model.bind(&mut g, v)?;
    let l = g.softmax_ce(f.output, labels.clone())?;
    let grads = g.backward(l)?;
    let analytic = collect_param_grads(&model, &g, &grads);
    // every parameter tensor, a strided subset of its elements
    let report = check_params_strided(&model, loss, &analytic, 1e-5, 7)?;
    let ok = report.passes(1e-4);
    Ok((ok, report.max_rel_err, format!("{} entries, worst {}", report.checked, report.worst)))
}
