//! The hierarchical spatiotemporal model.
//!
//! ```text
//! dFNC [B, N, N, T, 1]
//!   → embed (1 → C, padded cells zeroed)
//!   → stage 1 .. stage S, each: [merge] → rope → FST blocks → unrope
//!   → masked mean over (N, N, T) → linear head
//! ```
//!
//! An FST block splits `z: [B, N, N, T, C]` into a spatial summary
//! `h_c = mean_T z` and a temporal summary `h_t = masked mean_{N,N} z`,
//! encodes each with its own Mamba encoder (with residual), and recombines
//! them as `z + y_c · sigmoid(y_t)` broadcast over time and grid.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Affine, Module};
use crate::rope::{absolute_encoding, RopeConfig, StageEncoding, DEFAULT_THETA_BASE};
use crate::ssm::{Direction, MambaEncoder, MambaEncoderConfig, SeqLayout};
use crate::tensor::Tensor;
use crate::topology::{
    cva_index, cva_scatter_index, cvr_index, merged_mask, patch_index, ComponentAtlas, MergeLayer, StageConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    BinaryClassification,
    Regression,
}

impl Task {
    pub fn outputs(self) -> usize {
        match self {
            Task::BinaryClassification => 2,
            Task::Regression => 1,
        }
    }
}

/// Architecture switches mirroring the ablation study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_cva: bool,
    pub no_cvr: bool,
    pub no_comp_scan: bool,
    pub no_merge: bool,
    pub no_pos_enc: bool,
    pub abs_pos_enc: bool,
    pub no_unrope: bool,
    pub no_conn_branch: bool,
    pub no_temp_branch: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 9] = [
        "no_cva",
        "no_cvr",
        "no_comp_scan",
        "no_merge",
        "no_pos_enc",
        "abs_pos_enc",
        "no_unrope",
        "no_conn_branch",
        "no_temp_branch",
    ];

    fn flag_mut(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "no_cva" => &mut self.no_cva,
            "no_cvr" => &mut self.no_cvr,
            "no_comp_scan" => &mut self.no_comp_scan,
            "no_merge" => &mut self.no_merge,
            "no_pos_enc" => &mut self.no_pos_enc,
            "abs_pos_enc" => &mut self.abs_pos_enc,
            "no_unrope" => &mut self.no_unrope,
            "no_conn_branch" => &mut self.no_conn_branch,
            "no_temp_branch" => &mut self.no_temp_branch,
            _ => return None,
        })
    }

    pub fn enable(&mut self, name: &str) -> Result<()> {
        let flag = self
            .flag_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{name}' (known: {})", Self::NAMES.join(", "))))?;
        *flag = true;
        Ok(())
    }

    pub fn active(&self) -> Vec<&'static str> {
        let mut copy = *self;
        Self::NAMES.iter().copied().filter(|n| *copy.flag_mut(n).unwrap()).collect()
    }

    /// Flags active in either set.
    pub fn union(self, other: Ablations) -> Ablations {
        let mut out = self;
        for name in other.active() {
            *out.flag_mut(name).unwrap() = true;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [self.no_pos_enc, self.abs_pos_enc, self.no_unrope].iter().filter(|&&f| f).count();
        if pos > 1 {
            return Err(Error::Config("at most one positional-encoding ablation may be active".into()));
        }
        Ok(())
    }

    fn rope(&self) -> bool {
        !self.no_pos_enc && !self.abs_pos_enc
    }
}

/// Mamba-encoder hyperparameters shared by every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EncoderSettings {
    pub expansion: usize,
    pub conv_kernel: usize,
    pub state_size: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self { expansion: 2, conv_kernel: 4, state_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub atlas: ComponentAtlas,
    pub stages: StageConfig,
    pub base_channels: usize,
    pub task: Task,
    pub seed: u64,
    pub encoder: EncoderSettings,
    pub theta_base: f64,
    pub ablations: Ablations,
}

impl ModelConfig {
    /// 53 components padded to 56, `C = 24`, steps `{4, 4, 2, 1}`, depths `{2, 2, 6, 2}`.
    pub fn reference_default(task: Task, seed: u64) -> Self {
        let stages = StageConfig::default();
        Self {
            atlas: ComponentAtlas::neuromark(),
            base_channels: stages.channels[0],
            stages,
            task,
            seed,
            encoder: EncoderSettings::default(),
            theta_base: DEFAULT_THETA_BASE,
            ablations: Ablations::default(),
        }
    }

    /// A config over `atlas` with channels doubling from `base_channels`.
    pub fn small(atlas: ComponentAtlas, base_channels: usize, blocks: &[usize], steps: &[usize], task: Task, seed: u64) -> Result<Self> {
        let stages = StageConfig::doubling(base_channels, blocks, steps);
        let atlas = atlas.padded_for(&stages)?;
        Ok(Self {
            atlas,
            stages,
            base_channels,
            task,
            seed,
            encoder: EncoderSettings::default(),
            theta_base: DEFAULT_THETA_BASE,
            ablations: Ablations::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.atlas.validate()?;
        self.stages.validate()?;
        self.ablations.validate()?;
        if self.stages.channels[0] != self.base_channels {
            return Err(Error::Config(format!(
                "stage 1 has {} channels, base is {}",
                self.stages.channels[0], self.base_channels
            )));
        }
        self.stages.dims(self.atlas.n_padded)?;
        if self.ablations.rope() && self.stages.channels.iter().any(|c| c % 4 != 0) {
            return Err(Error::Config("rotary encodings need channel counts divisible by 4".into()));
        }
        Ok(())
    }

    fn conn_config(&self, c: usize) -> MambaEncoderConfig {
        let mut cfg = MambaEncoderConfig::connectivity(c);
        if self.ablations.no_comp_scan {
            cfg.directions.retain(|d| *d != Direction::ComponentSpecific);
        }
        self.apply_settings(cfg)
    }

    fn temp_config(&self, c: usize) -> MambaEncoderConfig {
        self.apply_settings(MambaEncoderConfig::temporal(c))
    }

    fn apply_settings(&self, mut cfg: MambaEncoderConfig) -> MambaEncoderConfig {
        cfg.expansion = self.encoder.expansion;
        cfg.conv_kernel = self.encoder.conv_kernel;
        cfg.state_size = self.encoder.state_size;
        cfg
    }
}

/// Spatial and temporal encoders of one block; `None` when ablated.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FstBlock {
    pub conn: Option<MambaEncoder>,
    pub temp: Option<MambaEncoder>,
}

/// Rearrangement steps applied around the connectivity encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub cva_step: usize,
    pub cvr_step: i64,
}

impl BlockSpec {
    pub const PLAIN: BlockSpec = BlockSpec { cva_step: 1, cvr_step: 0 };
}

impl FstBlock {
    /// `z: [B, N, N, T, C]`; `cell_weights[i * N + j]` weights the temporal summary.
    pub fn bind(&self, g: &mut Graph, z: Var, spec: BlockSpec, cell_weights: &[f64]) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 5 || s[1] != s[2] {
            return Err(Error::Shape(format!("FST block expects [B, N, N, T, C], got {s:?}")));
        }
        let (b, n, t, c) = (s[0], s[1], s[3], s[4]);
        if cell_weights.len() != n * n {
            return Err(Error::Shape(format!("{} cell weights for a {n}×{n} grid", cell_weights.len())));
        }
        let hc = g.weighted_sum_mid(z, vec![1.0 / t as f64; t], b * n * n, c, &[b, n, n, c])?;
        let ht = g.weighted_sum_mid(z, cell_weights.to_vec(), b, t * c, &[b, t, c])?;

        let yc = match &self.conn {
            Some(enc) => {
                let e = bind_connectivity(g, enc, hc, spec)?;
                g.add(e, hc)?
            }
            None => hc,
        };
        let yt = match &self.temp {
            Some(enc) => {
                let e = enc.bind(g, ht, SeqLayout::Plain)?;
                g.add(e, ht)?
            }
            None => ht,
        };
        g.gated_residual(z, yc, yt)
    }
}

/// `scatter(cvr⁻¹(Enc(cvr(cva(h_c)))))` with zeros off the strided diagonals.
fn bind_connectivity(g: &mut Graph, enc: &MambaEncoder, hc: Var, spec: BlockSpec) -> Result<Var> {
    let step = spec.cva_step;
    let grouped = if step > 1 {
        let (index, shape) = cva_index(g.shape(hc), step)?;
        g.gather(hc, index, &shape)?
    } else if step == 1 {
        hc
    } else {
        return Err(Error::Shape("CVA step must be ≥ 1".into()));
    };
    let gs = g.shape(grouped).to_vec();
    let rolled = if spec.cvr_step != 0 {
        let index = cvr_index(&gs, spec.cvr_step)?;
        g.gather(grouped, index, &gs)?
    } else {
        grouped
    };
    let (q, m, c) = (gs[0], gs[1], gs[3]);
    let seq = g.reshape(rolled, &[q, m * m, c])?;
    let out = enc.bind(g, seq, SeqLayout::Grid { n: m })?;
    let out = g.reshape(out, &gs)?;
    let out = if spec.cvr_step != 0 {
        let index = cvr_index(&gs, -spec.cvr_step)?;
        g.gather(out, index, &gs)?
    } else {
        out
    };
    if step > 1 {
        let (index, shape) = cva_scatter_index(&gs, step)?;
        g.gather(out, index, &shape)
    } else {
        Ok(out)
    }
}

/// Reduction between stages.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Downsample {
    Merge(MergeLayer),
    /// 2×2 stride-2 convolution (`4C → 2C`), used when merging is ablated.
    Patch(Affine),
}

impl Downsample {
    fn bind(&self, g: &mut Graph, z: Var) -> Result<Var> {
        match self {
            Downsample::Merge(m) => m.bind(g, z),
            Downsample::Patch(proj) => {
                let (index, shape) = patch_index(g.shape(z))?;
                let patches = g.gather(z, index, &shape)?;
                proj.bind(g, patches)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Stage {
    pub down: Option<Downsample>,
    pub blocks: Vec<FstBlock>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FstMamba {
    pub cfg: ModelConfig,
    pub embed: Affine,
    pub stages: Vec<Stage>,
    pub head: Affine,
}

/// Output of one forward pass recorded on a graph.
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Var,
    /// Shape after embedding and after every stage.
    pub trace: Vec<Vec<usize>>,
}

impl FstMamba {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c0 = cfg.base_channels;
        let embed = Affine::init(1, c0, &mut rng);
        let mut stages = Vec::with_capacity(cfg.stages.n_stages());
        for k in 0..cfg.stages.n_stages() {
            let c = cfg.stages.channels[k];
            let down = if cfg.stages.merge_before[k] {
                let prev = cfg.stages.channels[k - 1];
                Some(if cfg.ablations.no_merge {
                    Downsample::Patch(Affine::init(4 * prev, c, &mut rng))
                } else {
                    Downsample::Merge(MergeLayer::init(prev, &mut rng))
                })
            } else {
                None
            };
            let mut blocks = Vec::with_capacity(cfg.stages.blocks[k]);
            for _ in 0..cfg.stages.blocks[k] {
                let conn = if cfg.ablations.no_conn_branch {
                    None
                } else {
                    Some(MambaEncoder::init(cfg.conn_config(c), &mut rng)?)
                };
                let temp = if cfg.ablations.no_temp_branch {
                    None
                } else {
                    Some(MambaEncoder::init(cfg.temp_config(c), &mut rng)?)
                };
                blocks.push(FstBlock { conn, temp });
            }
            stages.push(Stage { down, blocks });
        }
        let c_last = *cfg.stages.channels.last().unwrap();
        let head = Affine::init(c_last, cfg.task.outputs(), &mut rng);
        Ok(Self { cfg, embed, stages, head })
    }

    pub fn n_outputs(&self) -> usize {
        self.cfg.task.outputs()
    }

    /// Component masks per stage (after any merge).
    pub fn stage_masks(&self) -> Vec<Vec<bool>> {
        let mut mask = self.cfg.atlas.pad_mask.clone();
        let mut out = Vec::new();
        for k in 0..self.cfg.stages.n_stages() {
            if self.cfg.stages.merge_before[k] {
                mask = merged_mask(&mask);
            }
            out.push(mask.clone());
        }
        out
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let p = self.cfg.atlas.n_padded;
        if shape.len() != 5 || shape[1] != p || shape[2] != p || shape[4] != 1 || shape[3] == 0 {
            return Err(Error::Shape(format!("model input must be [B, {p}, {p}, T, 1] (padded), got {shape:?}")));
        }
        Ok(())
    }

    /// Per-cell linear map `1 → C` with padded cells forced to zero.
    pub fn bind_embed(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        self.check_input(&s)?;
        let (b, n, t) = (s[0], s[1], s[3]);
        let pad = &self.cfg.atlas.pad_mask;
        let mut mask = Vec::with_capacity(b * n * n * t);
        for _ in 0..b {
            for i in 0..n {
                for j in 0..n {
                    let m = if pad[i] && pad[j] { 1.0 } else { 0.0 };
                    mask.extend(core::iter::repeat_n(m, t));
                }
            }
        }
        let e = self.embed.bind(g, x)?;
        g.mask_rows(e, mask)
    }

    /// Records the full forward pass for `x: [B, N', N', T, 1]`.
    pub fn bind(&self, g: &mut Graph, x: Var) -> Result<Forward> {
        let ab = self.cfg.ablations;
        let mut z = self.bind_embed(g, x)?;
        let mut trace = vec![g.shape(z).to_vec()];
        let masks = self.stage_masks();
        for (k, stage) in self.stages.iter().enumerate() {
            if let Some(down) = &stage.down {
                z = down.bind(g, z)?;
            }
            let s = g.shape(z).to_vec();
            let (n, t, c) = (s[1], s[3], s[4]);
            let encoding = StageEncoding::new(RopeConfig { theta_base: self.cfg.theta_base, channel_dim: c });
            if ab.abs_pos_enc {
                let pe = g.constant(absolute_encoding(n, t, c, self.cfg.theta_base));
                z = g.add_bias(z, pe)?;
            } else if ab.rope() {
                z = encoding.bind_rope(g, z)?;
            }
            let weights = cell_weights(&masks[k]);
            for (bi, block) in stage.blocks.iter().enumerate() {
                // the second, fourth, ... block of each stage rearranges
                let spec = if bi % 2 == 1 {
                    BlockSpec {
                        cva_step: if ab.no_cva { 1 } else { self.cfg.stages.cva_steps[k] },
                        cvr_step: if ab.no_cvr { 0 } else { self.cfg.stages.cvr_steps[k] as i64 },
                    }
                } else {
                    BlockSpec::PLAIN
                };
                z = block.bind(g, z, spec, &weights)?;
                if !g.value(z).all_finite() {
                    return Err(Error::NonFinite { location: format!("stage {} block {}", k + 1, bi + 1) });
                }
            }
            if ab.rope() && !ab.no_unrope {
                z = encoding.bind_unrope(g, z)?;
            }
            trace.push(g.shape(z).to_vec());
        }
        let s = g.shape(z).to_vec();
        let (b, n, t, c) = (s[0], s[1], s[3], s[4]);
        let mut pool = Vec::with_capacity(n * n * t);
        for w in cell_weights(masks.last().unwrap()) {
            pool.extend(core::iter::repeat_n(w / t as f64, t));
        }
        let pooled = g.weighted_sum_mid(z, pool, b, c, &[b, c])?;
        trace.push(vec![b, c]);
        let output = self.head.bind(g, pooled)?;
        if !g.value(output).all_finite() {
            return Err(Error::NonFinite { location: "head".into() });
        }
        Ok(Forward { output, trace })
    }

    /// Plain forward pass: logits `[B, 2]` or predictions `[B, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let f = self.bind(&mut g, v)?;
        Ok(g.value(f.output).clone())
    }

    /// Shapes after embedding, after each stage, and after pooling.
    pub fn dimension_trace(&self, x: &Tensor) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        Ok(self.bind(&mut g, v)?.trace)
    }
}

/// Uniform weights over real cells of the grid (zero on padding).
pub fn cell_weights(mask: &[bool]) -> Vec<f64> {
    let n = mask.len();
    let real = mask.iter().filter(|&&m| m).count();
    let w = 1.0 / (real * real).max(1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(if mask[i] && mask[j] { w } else { 0.0 });
        }
    }
    out
}

/// Plain embedding of a padded `[B, N', N', T, 1]` input.
pub fn embed(model: &FstMamba, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = model.bind_embed(&mut g, v)?;
    Ok(g.value(out).clone())
}

/// Plain evaluation of one block with uniform temporal-summary weights over
/// `mask`'s real cells.
pub fn fst_block_forward(z: &Tensor, spec: BlockSpec, block: &FstBlock, mask: &[bool]) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(z.clone());
    let out = block.bind(&mut g, v, spec, &cell_weights(mask))?;
    Ok(g.value(out).clone())
}

impl Module for FstMamba {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (k, stage) in self.stages.iter().enumerate() {
            let sp = join(prefix, &format!("stage{}", k + 1));
            match &stage.down {
                Some(Downsample::Merge(m)) => m.visit(&join(&sp, "merge"), f),
                Some(Downsample::Patch(p)) => p.visit(&join(&sp, "patch"), f),
                None => {}
            }
            for (b, block) in stage.blocks.iter().enumerate() {
                let bp = join(&sp, &format!("block{}", b + 1));
                if let Some(e) = &block.conn {
                    e.visit(&join(&bp, "conn"), f);
                }
                if let Some(e) = &block.temp {
                    e.visit(&join(&bp, "temp"), f);
                }
            }
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (k, stage) in self.stages.iter_mut().enumerate() {
            let sp = join(prefix, &format!("stage{}", k + 1));
            match &mut stage.down {
                Some(Downsample::Merge(m)) => m.visit_mut(&join(&sp, "merge"), f),
                Some(Downsample::Patch(p)) => p.visit_mut(&join(&sp, "patch"), f),
                None => {}
            }
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                let bp = join(&sp, &format!("block{}", b + 1));
                if let Some(e) = &mut block.conn {
                    e.visit_mut(&join(&bp, "conn"), f);
                }
                if let Some(e) = &mut block.temp {
                    e.visit_mut(&join(&bp, "temp"), f);
                }
            }
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Gradients of every parameter (in visit order) from a finished backward pass.
pub fn collect_param_grads<M: Module>(model: &M, g: &Graph, grads: &crate::autodiff::Grads) -> Vec<Tensor> {
    let mut out = Vec::new();
    model.visit("", &mut |_, t| out.push(g.param_grad(grads, t)));
    out
}
