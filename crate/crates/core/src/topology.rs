//! Rearrangements of the `[N, N]` connectivity grid.
//!
//! All grid operations take tensors laid out as `[B, N, N, inner...]` and
//! leave the trailing axes untouched. Each is expressed as an index map so
//! the same map drives both the plain functions here and the differentiable
//! versions on the tape.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::nn::{join, Affine, LayerNorm, Module};
use crate::tensor::Tensor;

/// A named contiguous group of components.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Network {
    pub name: String,
    pub components: Vec<String>,
}

/// Ordered components partitioned into networks, plus zero padding.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ComponentAtlas {
    pub name: String,
    pub networks: Vec<Network>,
    pub n_components: usize,
    pub n_padded: usize,
    pub pad_mask: Vec<bool>,
}

/// Network sizes of the 53-component, 7-network layout.
pub const NEUROMARK_NETWORKS: [(&str, usize); 7] =
    [("SC", 5), ("AUD", 2), ("SM", 9), ("VS", 9), ("CC", 17), ("DM", 7), ("CB", 4)];

impl ComponentAtlas {
    pub fn new(name: impl Into<String>, networks: Vec<Network>, n_padded: usize) -> Result<Self> {
        let n_components: usize = networks.iter().map(|n| n.components.len()).sum();
        if n_components == 0 {
            return Err(Error::Config("atlas has no components".into()));
        }
        if networks.iter().any(|n| n.components.is_empty()) {
            return Err(Error::Config("atlas network with no components".into()));
        }
        if n_padded < n_components {
            return Err(Error::Config(format!("padded size {n_padded} < {n_components} components")));
        }
        let pad_mask = (0..n_padded).map(|i| i < n_components).collect();
        Ok(Self { name: name.into(), networks, n_components, n_padded, pad_mask })
    }

    /// Networks with the given sizes and generated component names.
    pub fn from_sizes(name: impl Into<String>, sizes: &[(&str, usize)]) -> Result<Self> {
        let networks = sizes
            .iter()
            .map(|(net, k)| Network {
                name: String::from(*net),
                components: (1..=*k).map(|i| format!("{net}{i:02}")).collect(),
            })
            .collect::<Vec<_>>();
        let n = sizes.iter().map(|s| s.1).sum();
        Self::new(name, networks, n)
    }

    /// The 53-component layout padded for the default stage schedule (56).
    pub fn neuromark() -> Self {
        let atlas = Self::from_sizes("neuromark-53", &NEUROMARK_NETWORKS).expect("static layout");
        atlas.padded_for(&StageConfig::default()).expect("static layout")
    }

    /// `n` components split into `k` contiguous networks as evenly as possible.
    pub fn uniform(n: usize, k: usize) -> Result<Self> {
        if k == 0 || k > n {
            return Err(Error::Config(format!("cannot split {n} components into {k} networks")));
        }
        let names: Vec<String> = (0..k).map(|i| format!("N{}", i + 1)).collect();
        let sizes: Vec<(&str, usize)> =
            (0..k).map(|i| (names[i].as_str(), n / k + usize::from(i < n % k))).collect();
        Self::from_sizes(format!("uniform-{n}x{k}"), &sizes)
    }

    /// Same atlas with the smallest padding compatible with `stages`.
    pub fn padded_for(mut self, stages: &StageConfig) -> Result<Self> {
        let n = stages.min_padded(self.n_components)?;
        self.n_padded = n;
        self.pad_mask = (0..n).map(|i| i < self.n_components).collect();
        Ok(self)
    }

    /// Network index of every real component.
    pub fn network_of(&self) -> Vec<usize> {
        self.networks
            .iter()
            .enumerate()
            .flat_map(|(k, n)| core::iter::repeat_n(k, n.components.len()))
            .collect()
    }

    /// Half-open component range of each network.
    pub fn network_ranges(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.networks
            .iter()
            .map(|n| {
                let r = (start, start + n.components.len());
                start = r.1;
                r
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.networks.iter().map(|n| n.components.len()).sum();
        if total != self.n_components || self.pad_mask.len() != self.n_padded || self.n_padded < self.n_components {
            return Err(Error::Config(format!("atlas '{}' is inconsistent", self.name)));
        }
        if self.pad_mask.iter().enumerate().any(|(i, &m)| m != (i < self.n_components)) {
            return Err(Error::Config(format!("atlas '{}': pad mask must mark exactly the real components", self.name)));
        }
        Ok(())
    }
}

/// Per-stage layout of the hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StageConfig {
    pub channels: Vec<usize>,
    pub blocks: Vec<usize>,
    pub cva_steps: Vec<usize>,
    pub cvr_steps: Vec<usize>,
    pub merge_before: Vec<bool>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::doubling(24, &[2, 2, 6, 2], &[4, 4, 2, 1])
    }
}

impl StageConfig {
    /// Channels double at every merge; CVA and CVR share `steps`.
    pub fn doubling(base_channels: usize, blocks: &[usize], steps: &[usize]) -> Self {
        let n = blocks.len();
        Self {
            channels: (0..n).map(|i| base_channels << i).collect(),
            blocks: blocks.to_vec(),
            cva_steps: steps.to_vec(),
            cvr_steps: steps.to_vec(),
            merge_before: (0..n).map(|i| i > 0).collect(),
        }
    }

    pub fn n_stages(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.blocks.len();
        if n == 0 {
            return Err(Error::Config("no stages".into()));
        }
        for (name, len) in [
            ("channels", self.channels.len()),
            ("cva_steps", self.cva_steps.len()),
            ("cvr_steps", self.cvr_steps.len()),
            ("merge_before", self.merge_before.len()),
        ] {
            if len != n {
                return Err(Error::Config(format!("stage config: {name} has {len} entries for {n} stages")));
            }
        }
        if self.merge_before[0] {
            return Err(Error::Config("stage 1 cannot merge".into()));
        }
        if self.cva_steps.iter().any(|&s| s == 0) {
            return Err(Error::Config("CVA step sizes must be ≥ 1".into()));
        }
        for i in 1..n {
            let expect = if self.merge_before[i] { 2 * self.channels[i - 1] } else { self.channels[i - 1] };
            if self.channels[i] != expect {
                return Err(Error::Config(format!(
                    "stage {}: {} channels, expected {expect} after the previous stage",
                    i + 1,
                    self.channels[i]
                )));
            }
        }
        Ok(())
    }

    /// Component count at each stage starting from `n`.
    pub fn dims(&self, n: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.n_stages());
        let mut cur = n;
        for i in 0..self.n_stages() {
            if self.merge_before[i] {
                if cur % 2 != 0 {
                    return Err(Error::Shape(format!("stage {}: cannot merge {cur} components", i + 1)));
                }
                cur /= 2;
            }
            if cur % self.cva_steps[i] != 0 {
                return Err(Error::Shape(format!(
                    "stage {}: CVA step {} does not divide {cur}",
                    i + 1,
                    self.cva_steps[i]
                )));
            }
            out.push(cur);
        }
        Ok(out)
    }

    /// Smallest `n' ≥ n` for which every stage is well formed.
    pub fn min_padded(&self, n: usize) -> Result<usize> {
        self.validate()?;
        let merges = self.merge_before.iter().filter(|&&m| m).count();
        let limit = (n + 1) << (merges + 8);
        (n..=limit)
            .find(|&m| self.dims(m).is_ok())
            .ok_or_else(|| Error::Config(format!("no padded size ≥ {n} fits the stage schedule")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScanKind {
    ForwardFlatten,
    BackwardFlatten,
    ComponentSpecific,
}

/// Index paths over the `[N, N]` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    pub kind: ScanKind,
    pub sequences: Vec<Vec<(usize, usize)>>,
}

pub fn build_scan_order(kind: ScanKind, n: usize) -> ScanOrder {
    let row_major = || (0..n).flat_map(move |i| (0..n).map(move |j| (i, j)));
    let sequences = match kind {
        ScanKind::ForwardFlatten => vec![row_major().collect()],
        ScanKind::BackwardFlatten => {
            let mut s: Vec<_> = row_major().collect();
            s.reverse();
            vec![s]
        }
        ScanKind::ComponentSpecific => (0..n).map(|i| (0..n).map(|j| (i, j)).collect()).collect(),
    };
    ScanOrder { kind, sequences }
}

/// `(batch, n, inner)` of a `[B, N, N, inner...]` shape.
pub(crate) fn grid_dims(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 || shape[1] != shape[2] {
        return Err(Error::Shape(format!("{what}: expected [B, N, N, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[3..].iter().product()))
}

/// Index map of `cva(·, s)` over a `[B, N, N, inner...]` shape.
/// Group `g` holds `x[g + i·s, g + j·s]` and groups stack batch-major by `g`.
pub fn cva_index(shape: &[usize], s: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, n, inner) = grid_dims(shape, "cva")?;
    if s == 0 || n % s != 0 {
        return Err(Error::Shape(format!("cva: step {s} does not divide N = {n}")));
    }
    let m = n / s;
    let mut index = Vec::with_capacity(b * n * n * inner / s);
    for g in 0..s {
        for bi in 0..b {
            for i in 0..m {
                for j in 0..m {
                    let base = ((bi * n + g + i * s) * n + g + j * s) * inner;
                    index.extend(base..base + inner);
                }
            }
        }
    }
    let mut out_shape = vec![s * b, m, m];
    out_shape.extend_from_slice(&shape[3..]);
    Ok((index, out_shape))
}

/// Index map placing `[s·B, N/s, N/s, inner...]` groups back on the
/// strided diagonals of a `[B, N, N, inner...]` grid; uncovered cells map to
/// [`GATHER_ZERO`].
pub fn cva_scatter_index(group_shape: &[usize], s: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (sb, m, inner) = grid_dims(group_shape, "cva_scatter")?;
    if s == 0 || sb % s != 0 {
        return Err(Error::Shape(format!("cva_scatter: {sb} groups not divisible by step {s}")));
    }
    let (b, n) = (sb / s, m * s);
    let mut index = vec![GATHER_ZERO; b * n * n * inner];
    for g in 0..s {
        for bi in 0..b {
            for i in 0..m {
                for j in 0..m {
                    let dst = ((bi * n + g + i * s) * n + g + j * s) * inner;
                    let src = (((g * b + bi) * m + i) * m + j) * inner;
                    for k in 0..inner {
                        index[dst + k] = src + k;
                    }
                }
            }
        }
    }
    let mut out_shape = vec![b, n, n];
    out_shape.extend_from_slice(&group_shape[3..]);
    Ok((index, out_shape))
}

/// Index map of `cvr(·, r)`: `y[i, j] = x[(i + r) mod N, (j + r) mod N]`.
pub fn cvr_index(shape: &[usize], r: i64) -> Result<Vec<usize>> {
    let (b, n, inner) = grid_dims(shape, "cvr")?;
    let r = r.rem_euclid(n.max(1) as i64) as usize;
    let mut index = Vec::with_capacity(b * n * n * inner);
    for bi in 0..b {
        for i in 0..n {
            for j in 0..n {
                let base = ((bi * n + (i + r) % n) * n + (j + r) % n) * inner;
                index.extend(base..base + inner);
            }
        }
    }
    Ok(index)
}

/// Index map of the merge rearrangement: `[B, N, N, T, C] → [B, N/2, N/2, T, 2C]`
/// with channel `c` from `(2i, 2j)` and channel `C + c` from `(2i+1, 2j+1)`.
pub fn merge_index(shape: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if shape.len() != 5 || shape[1] != shape[2] {
        return Err(Error::Shape(format!("component merge expects [B, N, N, T, C], got {shape:?}")));
    }
    let (b, n, t, c) = (shape[0], shape[1], shape[3], shape[4]);
    if n % 2 != 0 {
        return Err(Error::Shape(format!("component merge needs even N, got {n}")));
    }
    let m = n / 2;
    let mut index = Vec::with_capacity(b * m * m * t * 2 * c);
    for bi in 0..b {
        for i in 0..m {
            for j in 0..m {
                for ti in 0..t {
                    for g in 0..2 {
                        let base = (((bi * n + 2 * i + g) * n + 2 * j + g) * t + ti) * c;
                        index.extend(base..base + c);
                    }
                }
            }
        }
    }
    Ok((index, vec![b, m, m, t, 2 * c]))
}

/// Index map of a 2×2 stride-2 patch gather: `[B, N, N, T, C] → [B, N/2, N/2, T, 4C]`
/// (patch order `(0,0), (0,1), (1,0), (1,1)`), used by the convolutional
/// downsampling that replaces merging in ablations.
pub fn patch_index(shape: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if shape.len() != 5 || shape[1] != shape[2] || shape[1] % 2 != 0 {
        return Err(Error::Shape(format!("patch downsampling expects [B, 2M, 2M, T, C], got {shape:?}")));
    }
    let (b, n, t, c) = (shape[0], shape[1], shape[3], shape[4]);
    let m = n / 2;
    let mut index = Vec::with_capacity(b * m * m * t * 4 * c);
    for bi in 0..b {
        for i in 0..m {
            for j in 0..m {
                for ti in 0..t {
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let base = (((bi * n + 2 * i + di) * n + 2 * j + dj) * t + ti) * c;
                        index.extend(base..base + c);
                    }
                }
            }
        }
    }
    Ok((index, vec![b, m, m, t, 4 * c]))
}

pub(crate) fn apply_index(x: &Tensor, index: &[usize], shape: &[usize]) -> Result<Tensor> {
    let data = index.iter().map(|&i| if i == GATHER_ZERO { 0.0 } else { x[i] }).collect();
    Tensor::from_vec(shape, data)
}

/// Groups strided diagonals: `[B, N, N, ...] → [s·B, N/s, N/s, ...]`.
pub fn cva(x: &Tensor, s: usize) -> Result<Tensor> {
    let (index, shape) = cva_index(x.shape(), s)?;
    apply_index(x, &index, &shape)
}

/// Writes CVA groups back over a copy of `base`; cells outside the strided
/// diagonals keep their `base` values.
pub fn cva_scatter(groups: &Tensor, base: &Tensor, s: usize) -> Result<Tensor> {
    let (index, shape) = cva_scatter_index(groups.shape(), s)?;
    if shape != base.shape() {
        return Err(Error::Shape(format!(
            "cva_scatter: groups {:?} with step {s} do not fit base {:?}",
            groups.shape(),
            base.shape()
        )));
    }
    let mut out = base.clone();
    for (o, &i) in out.data_mut().iter_mut().zip(&index) {
        if i != GATHER_ZERO {
            *o = groups[i];
        }
    }
    Ok(out)
}

/// Circular roll of both component axes by `r`.
pub fn cvr(x: &Tensor, r: i64) -> Result<Tensor> {
    let index = cvr_index(x.shape(), r)?;
    apply_index(x, &index, x.shape())
}

/// Zero-pads `x: [B, N, N, T]` to the atlas' padded size.
pub fn pad_to_atlas(x: &Tensor, atlas: &ComponentAtlas) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[1] != s[2] {
        return Err(Error::Shape(format!("pad_to_atlas expects [B, N, N, T], got {s:?}")));
    }
    if s[1] != atlas.n_components {
        return Err(Error::Shape(format!(
            "pad_to_atlas: input has {} components, atlas '{}' has {}",
            s[1], atlas.name, atlas.n_components
        )));
    }
    let (b, n, t, p) = (s[0], s[1], s[3], atlas.n_padded);
    let mut out = Tensor::zeros(&[b, p, p, t]);
    for bi in 0..b {
        for i in 0..n {
            for j in 0..n {
                let src = ((bi * n + i) * n + j) * t;
                let dst = ((bi * p + i) * p + j) * t;
                out.data_mut()[dst..dst + t].copy_from_slice(&x.data()[src..src + t]);
            }
        }
    }
    Ok(out)
}

/// Drops padding: `[..., N', N', T] → [..., N, N, T]` for the last three axes.
pub fn unpad(x: &Tensor, n: usize) -> Result<Tensor> {
    let r = x.rank();
    if r < 3 || x.shape()[r - 3] != x.shape()[r - 2] || x.shape()[r - 3] < n {
        return Err(Error::Shape(format!("unpad to {n}: got {:?}", x.shape())));
    }
    let (p, t) = (x.shape()[r - 3], x.shape()[r - 1]);
    let outer: usize = x.shape()[..r - 3].iter().product();
    let mut shape = x.shape().to_vec();
    shape[r - 3] = n;
    shape[r - 2] = n;
    let mut out = Tensor::zeros(&shape);
    for o in 0..outer {
        for i in 0..n {
            for j in 0..n {
                let src = ((o * p + i) * p + j) * t;
                let dst = ((o * n + i) * n + j) * t;
                out.data_mut()[dst..dst + t].copy_from_slice(&x.data()[src..src + t]);
            }
        }
    }
    Ok(out)
}

/// Component merging: CVA with step 2 stacked on the channel axis, layer
/// norm over the doubled channels, then a `2C → 2C` projection.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MergeLayer {
    pub norm: LayerNorm,
    pub proj: Affine,
}

impl MergeLayer {
    pub fn init(channels: usize, rng: &mut impl rand::Rng) -> Self {
        Self { norm: LayerNorm::new(2 * channels), proj: Affine::init(2 * channels, 2 * channels, rng) }
    }

    pub fn bind(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.bind_with(g, z, true)
    }

    /// `normalize = false` skips the layer norm (used to inspect the stacking).
    pub fn bind_with(&self, g: &mut Graph, z: Var, normalize: bool) -> Result<Var> {
        let (index, shape) = merge_index(g.shape(z))?;
        if shape[4] != self.proj.in_dim() {
            return Err(Error::Shape(format!(
                "merge layer built for {} channels, input has {}",
                self.proj.in_dim() / 2,
                shape[4] / 2
            )));
        }
        let stacked = g.gather(z, index, &shape)?;
        let normed = if normalize { self.norm.bind(g, stacked)? } else { stacked };
        self.proj.bind(g, normed)
    }
}

impl Module for MergeLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// `[B, N, N, T, C] → [B, N/2, N/2, T, 2C]`.
pub fn component_merge(z: &Tensor, layer: &MergeLayer) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(z.clone());
    let out = layer.bind(&mut g, v)?;
    Ok(g.value(out).clone())
}

/// Component validity after each merge: a merged component is real if
/// either of its sources is.
pub fn merged_mask(mask: &[bool]) -> Vec<bool> {
    mask.chunks(2).map(|c| c.iter().any(|&m| m)).collect()
}
