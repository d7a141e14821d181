//! Bidirectional (and component-specific) Mamba encoder.
//!
//! Layout: layer norm → two projections to the inner width (signal and gate)
//! → per direction: reorder, depthwise causal conv, SiLU, selective scan,
//! restore order → sum over directions → multiply by SiLU(gate) → project
//! back to the model width. The residual is left to the caller.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Affine, LayerNorm, Module};
use crate::ssm::SsmParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
    ComponentSpecific,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
            Direction::ComponentSpecific => "component_specific",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MambaEncoderConfig {
    pub model_dim: usize,
    pub expansion: usize,
    pub conv_kernel: usize,
    pub state_size: usize,
    pub directions: Vec<Direction>,
}

impl MambaEncoderConfig {
    fn with_dirs(model_dim: usize, directions: Vec<Direction>) -> Self {
        Self { model_dim, expansion: 2, conv_kernel: 4, state_size: 16, directions }
    }

    /// Forward, backward and row-wise scans over the connectivity grid.
    pub fn connectivity(model_dim: usize) -> Self {
        Self::with_dirs(
            model_dim,
            alloc::vec![Direction::Forward, Direction::Backward, Direction::ComponentSpecific],
        )
    }

    /// Forward and backward scans over time.
    pub fn temporal(model_dim: usize) -> Self {
        Self::with_dirs(model_dim, alloc::vec![Direction::Forward, Direction::Backward])
    }

    pub fn inner_dim(&self) -> usize {
        self.expansion * self.model_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.expansion == 0 || self.conv_kernel == 0 || self.state_size == 0 {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if self.directions.is_empty() {
            return Err(Error::Config("encoder needs at least one scan direction".into()));
        }
        for (i, d) in self.directions.iter().enumerate() {
            if self.directions[..i].contains(d) {
                return Err(Error::Config(format!("duplicate scan direction {}", d.name())));
            }
        }
        Ok(())
    }
}

/// How the `L` axis of an encoder input is organized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqLayout {
    /// Plain sequences (e.g. time).
    Plain,
    /// Row-major flattening of an `n × n` grid (`L = n²`).
    Grid { n: usize },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DirectionParams {
    pub direction: Direction,
    /// `[E, K]`
    pub conv_weight: Tensor,
    /// `[E]`
    pub conv_bias: Tensor,
    pub ssm: SsmParams,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MambaEncoder {
    pub cfg: MambaEncoderConfig,
    pub norm: LayerNorm,
    pub in_signal: Affine,
    pub in_gate: Affine,
    pub directions: Vec<DirectionParams>,
    pub out_proj: Affine,
}

impl MambaEncoder {
    pub fn init(cfg: MambaEncoderConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, e, k) = (cfg.model_dim, cfg.inner_dim(), cfg.conv_kernel);
        let bound = 1.0 / crate::math::sqrt(k as f64);
        let directions = cfg
            .directions
            .iter()
            .map(|&direction| DirectionParams {
                direction,
                conv_weight: Tensor::from_fn(&[e, k], |_| bound * (2.0 * rng.random::<f64>() - 1.0)),
                conv_bias: Tensor::zeros(&[e]),
                ssm: SsmParams::init(e, cfg.state_size, rng),
            })
            .collect();
        Ok(Self {
            norm: LayerNorm::new(c),
            in_signal: Affine::init(c, e, rng),
            in_gate: Affine::init(c, e, rng),
            directions,
            out_proj: Affine::init(e, c, rng),
            cfg,
        })
    }

    /// Records the encoder on `g` for `x: [Q, L, C]`; returns `[Q, L, C]`.
    pub fn bind(&self, g: &mut Graph, x: Var, layout: SeqLayout) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.model_dim {
            return Err(Error::Shape(format!(
                "encoder expects [Q, L, {}], got {shape:?}",
                self.cfg.model_dim
            )));
        }
        let l = shape[1];
        let grid_n = match layout {
            SeqLayout::Grid { n } if n * n == l => Some(n),
            SeqLayout::Grid { n } => {
                return Err(Error::Shape(format!("grid layout n = {n} does not match L = {l}")));
            }
            SeqLayout::Plain => None,
        };
        if grid_n.is_none() && self.cfg.directions.contains(&Direction::ComponentSpecific) {
            return Err(Error::Config("component-specific scan requested on sequences without row structure".into()));
        }

        let xn = self.norm.bind(g, x)?;
        let signal = self.in_signal.bind(g, xn)?;
        let gate = self.in_gate.bind(g, xn)?;

        let mut total: Option<Var> = None;
        for dir in &self.directions {
            let y = self.bind_ordered(g, dir, signal, grid_n)?;
            total = Some(match total {
                None => y,
                Some(t) => g.add(t, y)?,
            });
        }
        let total = total.expect("validated non-empty");
        let gate = g.unary(gate, Unary::Silu);
        let gated = g.mul(total, gate)?;
        self.out_proj.bind(g, gated)
    }

    fn bind_direction(&self, g: &mut Graph, dir: &DirectionParams, seq: Var) -> Result<Var> {
        let w = g.param(&dir.conv_weight);
        let b = g.param(&dir.conv_bias);
        let conv = g.causal_conv(seq, w, b)?;
        let u = g.unary(conv, Unary::Silu);
        let ssm = &dir.ssm;
        let dt = ssm.delta_proj.bind(g, u)?;
        let dt = g.unary(dt, Unary::Softplus);
        let bm = ssm.b_proj.bind(g, u)?;
        let cm = ssm.c_proj.bind(g, u)?;
        let a_log = g.param(&ssm.a_log);
        let a = g.unary(a_log, Unary::NegExp);
        let d = g.param(&ssm.d_skip);
        g.scan(u, dt, a, bm, cm, d)
    }

    /// Plain evaluation of [`MambaEncoder::bind`].
    pub fn forward(&self, x: &Tensor, layout: SeqLayout) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = self.bind(&mut g, v, layout)?;
        Ok(g.value(out).clone())
    }

    /// Output of each direction in grid order, before fusion and gating
    /// (`[Q, L, E]` per direction).
    pub fn direction_outputs(&self, x: &Tensor, layout: SeqLayout) -> Result<Vec<(Direction, Tensor)>> {
        self.directions
            .iter()
            .map(|dir| Ok((dir.direction, self.pre_fusion(dir, x, layout)?)))
            .collect()
    }

    /// Reorders `signal: [Q, L, E]` for `dir`, scans, and restores grid order.
    fn bind_ordered(&self, g: &mut Graph, dir: &DirectionParams, signal: Var, grid_n: Option<usize>) -> Result<Var> {
        let shape = g.shape(signal).to_vec();
        let (q, l, e) = (shape[0], shape[1], shape[2]);
        match dir.direction {
            Direction::Forward => self.bind_direction(g, dir, signal),
            Direction::Backward => {
                let rev = reverse_index(q, l, e);
                let s = g.gather(signal, rev.clone(), &shape)?;
                let y = self.bind_direction(g, dir, s)?;
                g.gather(y, rev, &shape)
            }
            Direction::ComponentSpecific => {
                let n = grid_n.ok_or_else(|| {
                    Error::Config("component-specific scan requested on sequences without row structure".into())
                })?;
                let s = g.reshape(signal, &[q * n, n, e])?;
                let y = self.bind_direction(g, dir, s)?;
                g.reshape(y, &shape)
            }
        }
    }

    fn pre_fusion(&self, dir: &DirectionParams, x: &Tensor, layout: SeqLayout) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let xn = self.norm.bind(&mut g, v)?;
        let signal = self.in_signal.bind(&mut g, xn)?;
        let grid_n = match layout {
            SeqLayout::Grid { n } => Some(n),
            SeqLayout::Plain => None,
        };
        let y = self.bind_ordered(&mut g, dir, signal, grid_n)?;
        Ok(g.value(y).clone())
    }
}

fn reverse_index(q: usize, l: usize, e: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(q * l * e);
    for qi in 0..q {
        for t in 0..l {
            let base = (qi * l + (l - 1 - t)) * e;
            idx.extend(base..base + e);
        }
    }
    idx
}

impl Module for MambaEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.in_signal.visit(&join(prefix, "in_signal"), f);
        self.in_gate.visit(&join(prefix, "in_gate"), f);
        for d in &self.directions {
            let p = join(prefix, d.direction.name());
            f(join(&p, "conv_weight"), &d.conv_weight);
            f(join(&p, "conv_bias"), &d.conv_bias);
            f(join(&p, "a_log"), &d.ssm.a_log);
            f(join(&p, "d_skip"), &d.ssm.d_skip);
            d.ssm.delta_proj.visit(&join(&p, "delta_proj"), f);
            d.ssm.b_proj.visit(&join(&p, "b_proj"), f);
            d.ssm.c_proj.visit(&join(&p, "c_proj"), f);
        }
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.in_signal.visit_mut(&join(prefix, "in_signal"), f);
        self.in_gate.visit_mut(&join(prefix, "in_gate"), f);
        for d in &mut self.directions {
            let p = join(prefix, d.direction.name());
            f(join(&p, "conv_weight"), &mut d.conv_weight);
            f(join(&p, "conv_bias"), &mut d.conv_bias);
            f(join(&p, "a_log"), &mut d.ssm.a_log);
            f(join(&p, "d_skip"), &mut d.ssm.d_skip);
            d.ssm.delta_proj.visit_mut(&join(&p, "delta_proj"), f);
            d.ssm.b_proj.visit_mut(&join(&p, "b_proj"), f);
            d.ssm.c_proj.visit_mut(&join(&p, "c_proj"), f);
        }
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}
