//! Discretized selective state-space scan.
//!
//! The continuous system `h' = A h + B x, y = C h + D x` with diagonal `A` is
//! discretized by zero-order hold per time step:
//!
//! ```text
//! a_bar = exp(Δ a)
//! b_bar = (exp(Δ a) - 1) / a · b
//! h_t   = a_bar ⊙ h_{t-1} + b_bar x_t
//! y_t   = <c_t, h_t> + d x_t
//! ```
//!
//! `Δ`, `b` and `c` may vary per step (selectivity). With them held constant
//! the recurrence equals a causal convolution with kernel
//! `K_k = Σ_n c_n a_bar_n^k b_bar_n`, which [`ssm_conv_oracle`] evaluates
//! directly and is used as an independent check on the recurrent path.

mod encoder;

pub use encoder::{Direction, MambaEncoder, MambaEncoderConfig, SeqLayout};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::Affine;
use crate::tensor::Tensor;

/// Below this `|a|` the ZOH input factor switches to its `a → 0` limit `Δ`.
pub const EPS_A: f64 = 1e-6;

/// Zero-order-hold discretization of one diagonal entry.
pub fn discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !a.is_finite() || !b.is_finite() || !delta.is_finite() {
        return Err(Error::Domain(format!("discretize({a}, {b}, {delta}): non-finite input")));
    }
    if delta <= 0.0 {
        return Err(Error::Domain(format!("discretize: step must be positive, got {delta}")));
    }
    let (a_bar, phi) = zoh(a, delta);
    Ok((a_bar, phi * b))
}

/// `a_bar` and the input factor `phi = b_bar / b` for one entry.
#[inline]
fn zoh(a: f64, delta: f64) -> (f64, f64) {
    let (a_bar, em1) = math::exp_expm1(delta * a);
    if a.abs() < EPS_A {
        (a_bar, delta)
    } else {
        (a_bar, em1 / a)
    }
}

/// `(∂phi/∂Δ, ∂phi/∂a)` given the values from [`zoh`].
#[inline]
fn zoh_partials(a: f64, delta: f64, a_bar: f64, phi: f64) -> (f64, f64) {
    if a.abs() < EPS_A {
        (1.0, 0.5 * delta * delta)
    } else {
        (a_bar, (delta * a_bar - phi) / a)
    }
}

/// Raw operands of one scan, all row-major.
///
/// * `u`, `delta`: `[q, l, e]` (delta already positive)
/// * `a`: `[e, n]` (already negative)
/// * `b`, `c`: `[q, l, n]`
/// * `d`: `[e]`
#[derive(Debug, Clone, Copy)]
pub struct ScanOperands<'a> {
    pub q: usize,
    pub l: usize,
    pub e: usize,
    pub n: usize,
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
}

impl ScanOperands<'_> {
    fn check(&self) -> Result<()> {
        let (q, l, e, n) = (self.q, self.l, self.e, self.n);
        let ok = self.u.len() == q * l * e
            && self.delta.len() == q * l * e
            && self.a.len() == e * n
            && self.b.len() == q * l * n
            && self.c.len() == q * l * n
            && self.d.len() == e;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("scan operands inconsistent with q={q} l={l} e={e} n={n}")))
        }
    }
}

/// Gradients of a scan with respect to each operand.
#[derive(Debug, Clone)]
pub struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

/// Left-to-right recurrence for every (sequence, channel); `h_0 = 0`.
pub fn scan_forward(ops: &ScanOperands<'_>) -> Result<Vec<f64>> {
    ops.check()?;
    let ScanOperands { q, l, e, n, u, delta, a, b, c, d } = *ops;
    let mut y = vec![0.0; q * l * e];
    let mut h = vec![0.0; n];
    for qi in 0..q {
        for ei in 0..e {
            h.fill(0.0);
            let a_row = &a[ei * n..(ei + 1) * n];
            for t in 0..l {
                let x_idx = (qi * l + t) * e + ei;
                let bc = (qi * l + t) * n;
                let (b_t, c_t) = (&b[bc..bc + n], &c[bc..bc + n]);
                let (x, dt) = (u[x_idx], delta[x_idx]);
                let mut acc = 0.0;
                for s in 0..n {
                    let (a_bar, phi) = zoh(a_row[s], dt);
                    h[s] = a_bar * h[s] + phi * b_t[s] * x;
                    acc += c_t[s] * h[s];
                }
                y[x_idx] = acc + d[ei] * x;
            }
        }
    }
    Ok(y)
}

/// Reverse-mode adjoint of [`scan_forward`]. States are recomputed per
/// (sequence, channel) so memory stays `O(l · n)` beyond the outputs.
pub fn scan_backward(ops: &ScanOperands<'_>, gy: &[f64]) -> Result<ScanGrads> {
    ops.check()?;
    let ScanOperands { q, l, e, n, u, delta, a, b, c, d } = *ops;
    if gy.len() != q * l * e {
        return Err(Error::Shape(format!("scan adjoint has {} entries, expected {}", gy.len(), q * l * e)));
    }
    let mut g = ScanGrads {
        u: vec![0.0; q * l * e],
        delta: vec![0.0; q * l * e],
        a: vec![0.0; e * n],
        b: vec![0.0; q * l * n],
        c: vec![0.0; q * l * n],
        d: vec![0.0; e],
    };
    // row t of each buffer holds step t; hs has an extra leading zero row for h_0
    let mut hs = vec![0.0; (l + 1) * n];
    let mut abar = vec![0.0; l * n];
    let mut phis = vec![0.0; l * n];
    let mut gh = vec![0.0; n];
    for qi in 0..q {
        for ei in 0..e {
            let a_row = &a[ei * n..(ei + 1) * n];
            for t in 0..l {
                let x_idx = (qi * l + t) * e + ei;
                let bc = (qi * l + t) * n;
                let (x, dt) = (u[x_idx], delta[x_idx]);
                let (prev, cur) = hs[t * n..(t + 2) * n].split_at_mut(n);
                for s in 0..n {
                    let (a_bar, phi) = zoh(a_row[s], dt);
                    abar[t * n + s] = a_bar;
                    phis[t * n + s] = phi;
                    cur[s] = a_bar * prev[s] + phi * b[bc + s] * x;
                }
            }
            gh.fill(0.0);
            let mut g_a = vec![0.0; n];
            for t in (0..l).rev() {
                let x_idx = (qi * l + t) * e + ei;
                let bc = (qi * l + t) * n;
                let (gyt, x, dt) = (gy[x_idx], u[x_idx], delta[x_idx]);
                g.d[ei] += gyt * x;
                let mut gu = d[ei] * gyt;
                let mut gdelta = 0.0;
                let (prev, cur) = (&hs[t * n..(t + 1) * n], &hs[(t + 1) * n..(t + 2) * n]);
                let next_abar = if t + 1 < l { Some(&abar[(t + 1) * n..(t + 2) * n]) } else { None };
                for s in 0..n {
                    let (a_bar, phi) = (abar[t * n + s], phis[t * n + s]);
                    // adjoint of h_t: from y_t and from h_{t+1}
                    let carry = next_abar.map_or(0.0, |na| na[s] * gh[s]);
                    let ght = gyt * c[bc + s] + carry;
                    gh[s] = ght;
                    g.c[bc + s] += gyt * cur[s];
                    let g_abar = ght * prev[s];
                    let g_bbar = ght * x;
                    let bs = b[bc + s];
                    gu += ght * phi * bs;
                    g.b[bc + s] += g_bbar * phi;
                    let (dphi_ddelta, dphi_da) = zoh_partials(a_row[s], dt, a_bar, phi);
                    gdelta += g_abar * a_row[s] * a_bar + g_bbar * bs * dphi_ddelta;
                    g_a[s] += g_abar * dt * a_bar + g_bbar * bs * dphi_da;
                }
                g.u[x_idx] += gu;
                g.delta[x_idx] += gdelta;
            }
            for s in 0..n {
                g.a[ei * n + s] += g_a[s];
            }
        }
    }
    Ok(g)
}

/// Causal convolution form of a time-invariant scan for one channel:
/// `y = x * K + d x` with `K_k = Σ_s c_s a_bar_s^k b_bar_s`.
///
/// The state vectors `a_bar`, `b_bar`, `c` have equal length (the state size).
pub fn ssm_conv_oracle(x: &[f64], a_bar: &[f64], b_bar: &[f64], c: &[f64], d: f64) -> Result<Vec<f64>> {
    if a_bar.len() != b_bar.len() || a_bar.len() != c.len() {
        return Err(Error::Shape(format!(
            "conv oracle state vectors differ in length: {}, {}, {}",
            a_bar.len(),
            b_bar.len(),
            c.len()
        )));
    }
    let l = x.len();
    let kernel = conv_kernel(l, a_bar, b_bar, c);
    let mut y = vec![0.0; l];
    for t in 0..l {
        let mut acc = d * x[t];
        for k in 0..=t {
            acc += kernel[k] * x[t - k];
        }
        y[t] = acc;
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { location: format!("conv oracle (L={l})") });
    }
    Ok(y)
}

/// `K_0..K_{len-1}` of the convolution form.
pub fn conv_kernel(len: usize, a_bar: &[f64], b_bar: &[f64], c: &[f64]) -> Vec<f64> {
    let mut pow: Vec<f64> = b_bar.iter().zip(c).map(|(b, c)| b * c).collect();
    let mut kernel = vec![0.0; len];
    for k in kernel.iter_mut() {
        *k = pow.iter().sum();
        for (p, a) in pow.iter_mut().zip(a_bar) {
            *p *= a;
        }
    }
    kernel
}

/// Parameters of one scan direction.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SsmParams {
    /// `[e, n]`; `A = -exp(a_log)`.
    pub a_log: Tensor,
    /// `[e]`
    pub d_skip: Tensor,
    /// `e → e`, pre-softplus step size.
    pub delta_proj: Affine,
    /// `e → n`
    pub b_proj: Affine,
    /// `e → n`
    pub c_proj: Affine,
}

impl SsmParams {
    pub fn inner_dim(&self) -> usize {
        self.d_skip.len()
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// `A = -exp(a_log)`, strictly negative.
    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -math::exp(v))
    }

    /// Standard selective-SSM initialization: `-A_{e,s} = s + 1`, step sizes
    /// log-uniform in `[dt_min, dt_max]` via the softplus bias, `D = 1`.
    pub fn init(inner: usize, state: usize, rng: &mut impl rand::Rng) -> Self {
        Self::init_with(inner, state, 1e-3, 1e-1, rng)
    }

    pub fn init_with(inner: usize, state: usize, dt_min: f64, dt_max: f64, rng: &mut impl rand::Rng) -> Self {
        let a_log = Tensor::from_fn(&[inner, state], |i| math::ln((i[1] + 1) as f64));
        let mut delta_proj = Affine::init(inner, inner, rng);
        let (lo, hi) = (math::ln(dt_min), math::ln(dt_max));
        for v in delta_proj.bias.data_mut() {
            let dt = math::exp(lo + (hi - lo) * rng.random::<f64>());
            *v = math::softplus_inv(dt);
        }
        Self {
            a_log,
            d_skip: Tensor::full(&[inner], 1.0),
            delta_proj,
            b_proj: Affine::init(inner, state, rng),
            c_proj: Affine::init(inner, state, rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.inner_dim();
        let n = self.a_log.shape().get(1).copied().unwrap_or(0);
        if e == 0 || n == 0 || self.a_log.shape() != [e, n] {
            return Err(Error::Config(format!("ssm params: bad a_log shape {:?}", self.a_log.shape())));
        }
        for (name, p, out) in [
            ("delta_proj", &self.delta_proj, e),
            ("b_proj", &self.b_proj, n),
            ("c_proj", &self.c_proj, n),
        ] {
            if p.in_dim() != e || p.out_dim() != out {
                return Err(Error::Config(format!(
                    "ssm params: {name} maps {} → {}, expected {e} → {out}",
                    p.in_dim(),
                    p.out_dim()
                )));
            }
        }
        Ok(())
    }
}

/// Identifies which scan order produced a batch of sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OrderingId {
    Forward,
    Backward,
    ComponentSpecific,
    Temporal,
}

/// `q` independent sequences of common length `l` over `e` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSequenceBatch {
    pub data: Tensor,
    pub ordering_id: OrderingId,
}

impl ScanSequenceBatch {
    pub fn new(data: Tensor, ordering_id: OrderingId) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Shape(format!("scan batch must be [q, l, e], got {:?}", data.shape())));
        }
        Ok(Self { data, ordering_id })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }
}

/// Input-dependent projections of one batch: `(Δ, B, C)`.
pub fn selective_inputs(x: &Tensor, params: &SsmParams) -> Result<(Tensor, Tensor, Tensor)> {
    let delta = params.delta_proj.apply(x)?.map(math::softplus);
    let b = params.b_proj.apply(x)?;
    let c = params.c_proj.apply(x)?;
    Ok((delta, b, c))
}

/// Runs the selective scan on every sequence of `seq`; output is `[q, l, e]`.
pub fn selective_scan(seq: &ScanSequenceBatch, params: &SsmParams) -> Result<Tensor> {
    params.validate()?;
    let (q, l, e) = seq.dims();
    if e != params.inner_dim() {
        return Err(Error::Shape(format!("scan batch has {e} channels, params expect {}", params.inner_dim())));
    }
    if l == 0 || q == 0 {
        return Ok(Tensor::zeros(&[q, l, e]));
    }
    let (delta, b, c) = selective_inputs(&seq.data, params)?;
    let a = params.a();
    let ops = ScanOperands {
        q,
        l,
        e,
        n: params.state_size(),
        u: seq.data.data(),
        delta: delta.data(),
        a: a.data(),
        b: b.data(),
        c: c.data(),
        d: params.d_skip.data(),
    };
    let y = scan_forward(&ops)?;
    if let Some(bad) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { location: format!("selective scan, sequence {}", bad / (l * e)) });
    }
    Tensor::from_vec(&[q, l, e], y)
}

#[cfg(test)]
mod tests;
