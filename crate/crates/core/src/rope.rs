//! Rotary position encodings.
//!
//! * temporal: channel pairs `(2k, 2k+1)` at time `n` are rotated by `n θ_k`;
//! * spatial (symmetric): channel 4-blocks at grid cell `(x, y)` are mapped by
//!   the reflections `S_{xθ_k}` on `(4k, 4k+1)` and `S_{yθ_k}` on
//!   `(4k+2, 4k+3)`, where `S_a = [[sin a, cos a], [cos a, -sin a]]`.
//!
//! `S_a` is orthogonal, symmetric and involutory, so the spatial inverse is
//! the forward map itself, and `S_a S_b` is the rotation by `(b - a)`.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, OrthogonalMap, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const DEFAULT_THETA_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RopeConfig {
    pub theta_base: f64,
    pub channel_dim: usize,
}

impl RopeConfig {
    pub fn new(channel_dim: usize) -> Self {
        Self { theta_base: DEFAULT_THETA_BASE, channel_dim }
    }

    /// `θ_k = base^(-2k/C)` for each channel pair.
    pub fn temporal_freqs(&self) -> Result<Vec<f64>> {
        let c = self.channel_dim;
        if c == 0 || c % 2 != 0 {
            return Err(Error::Config(format!("temporal rope needs an even channel count, got {c}")));
        }
        Ok((0..c / 2).map(|k| math::powf(self.theta_base, -2.0 * k as f64 / c as f64)).collect())
    }

    /// `θ_k = base^(-2k/(C/2))` for each 4-channel block.
    pub fn spatial_freqs(&self) -> Result<Vec<f64>> {
        let c = self.channel_dim;
        if c == 0 || c % 4 != 0 {
            return Err(Error::Config(format!("symmetric rope needs channels divisible by 4, got {c}")));
        }
        let d = (c / 2) as f64;
        Ok((0..c / 4).map(|k| math::powf(self.theta_base, -2.0 * k as f64 / d)).collect())
    }
}

/// The 2×2 rotation `[[cos a, -sin a], [sin a, cos a]]`.
pub fn rotation(a: f64) -> [[f64; 2]; 2] {
    let (s, c) = (math::sin(a), math::cos(a));
    [[c, -s], [s, c]]
}

/// The 2×2 reflection `[[sin a, cos a], [cos a, -sin a]]`.
pub fn reflection(a: f64) -> [[f64; 2]; 2] {
    let (s, c) = (math::sin(a), math::cos(a));
    [[s, c], [c, -s]]
}

#[inline]
fn mat2(m: &[[f64; 2]; 2], v0: f64, v1: f64) -> (f64, f64) {
    (m[0][0] * v0 + m[0][1] * v1, m[1][0] * v0 + m[1][1] * v1)
}

fn check_last(x: &Tensor, c: usize, needed: usize, what: &str) -> Result<()> {
    if x.rank() < needed || x.shape()[x.rank() - 1] != c {
        return Err(Error::Shape(format!("{what}: tensor {:?} does not end in {c} channels", x.shape())));
    }
    Ok(())
}

/// Rotates channel pairs of `x: [..., L, C]` by `n θ_k` at position `n`
/// (by `-n θ_k` when `inverse`).
pub fn rope1d_apply(x: &Tensor, cfg: &RopeConfig, inverse: bool) -> Result<Tensor> {
    let freqs = cfg.temporal_freqs()?;
    let c = cfg.channel_dim;
    check_last(x, c, 2, "rope1d")?;
    let l = x.shape()[x.rank() - 2];
    let sign = if inverse { -1.0 } else { 1.0 };
    let table = angle_table(&freqs, l, sign, rotation);
    let k = freqs.len();
    let mut out = x.clone();
    for (row_idx, row) in out.data_mut().chunks_mut(c).enumerate() {
        let n = row_idx % l;
        apply_pairs(row, &table[n * k..(n + 1) * k]);
    }
    Ok(out)
}

/// `matrix(sign · p · θ_k)` for `p < positions`, laid out `[p][k]`.
fn angle_table(freqs: &[f64], positions: usize, sign: f64, matrix: fn(f64) -> [[f64; 2]; 2]) -> Vec<[[f64; 2]; 2]> {
    (0..positions)
        .flat_map(|p| freqs.iter().map(move |&theta| matrix(sign * p as f64 * theta)))
        .collect()
}

fn apply_pairs(row: &mut [f64], mats: &[[[f64; 2]; 2]]) {
    for (k, m) in mats.iter().enumerate() {
        let (a, b) = mat2(m, row[2 * k], row[2 * k + 1]);
        row[2 * k] = a;
        row[2 * k + 1] = b;
    }
}

fn apply_blocks(row: &mut [f64], sx: &[[[f64; 2]; 2]], sy: &[[[f64; 2]; 2]]) {
    for k in 0..sx.len() {
        let (a, b) = mat2(&sx[k], row[4 * k], row[4 * k + 1]);
        let (c, d) = mat2(&sy[k], row[4 * k + 2], row[4 * k + 3]);
        row[4 * k] = a;
        row[4 * k + 1] = b;
        row[4 * k + 2] = c;
        row[4 * k + 3] = d;
    }
}

/// Symmetric spatial encoding of `x: [..., N, N, C]`. The map is its own
/// inverse, so `inverse` selects the same transform.
pub fn symrope_apply(x: &Tensor, cfg: &RopeConfig, inverse: bool) -> Result<Tensor> {
    let _ = inverse;
    let freqs = cfg.spatial_freqs()?;
    let c = cfg.channel_dim;
    check_last(x, c, 3, "symrope")?;
    let r = x.rank();
    let (nx, ny) = (x.shape()[r - 3], x.shape()[r - 2]);
    let table = angle_table(&freqs, nx.max(ny), 1.0, reflection);
    let k = freqs.len();
    let mut out = x.clone();
    for (row_idx, row) in out.data_mut().chunks_mut(c).enumerate() {
        let j = row_idx % ny;
        let i = (row_idx / ny) % nx;
        apply_blocks(row, &table[i * k..(i + 1) * k], &table[j * k..(j + 1) * k]);
    }
    Ok(out)
}

/// Per-stage encoding of `z: [B, N, N, T, C]`: temporal rotation over `T`
/// followed by the symmetric spatial map over `(N, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageEncoding {
    pub cfg: RopeConfig,
    pub temporal: bool,
    pub spatial: bool,
}

impl StageEncoding {
    pub fn new(cfg: RopeConfig) -> Self {
        Self { cfg, temporal: true, spatial: true }
    }

    fn validate(&self, z: &Tensor) -> Result<()> {
        if z.rank() != 5 || z.shape()[1] != z.shape()[2] || z.shape()[4] != self.cfg.channel_dim {
            return Err(Error::Shape(format!(
                "stage encoding expects [B, N, N, T, {}], got {:?}",
                self.cfg.channel_dim,
                z.shape()
            )));
        }
        if self.temporal {
            self.cfg.temporal_freqs()?;
        }
        if self.spatial {
            self.cfg.spatial_freqs()?;
        }
        Ok(())
    }

    fn run(&self, z: &Tensor, encode: bool) -> Result<Tensor> {
        self.validate(z)?;
        let s = z.shape();
        let (n, t, c) = (s[1], s[3], s[4]);
        let tf = if self.temporal { self.cfg.temporal_freqs()? } else { Vec::new() };
        let sf = if self.spatial { self.cfg.spatial_freqs()? } else { Vec::new() };
        let sign = if encode { 1.0 } else { -1.0 };
        let rotations = angle_table(&tf, t, sign, rotation);
        let reflections = angle_table(&sf, n, 1.0, reflection);
        let (kt, ks) = (tf.len(), sf.len());
        let mut out = z.clone();
        for (row_idx, row) in out.data_mut().chunks_mut(c).enumerate() {
            let ti = row_idx % t;
            let j = (row_idx / t) % n;
            let i = (row_idx / (t * n)) % n;
            let rot = &rotations[ti * kt..(ti + 1) * kt];
            let (sx, sy) = (&reflections[i * ks..(i + 1) * ks], &reflections[j * ks..(j + 1) * ks]);
            if encode {
                apply_pairs(row, rot);
                apply_blocks(row, sx, sy);
            } else {
                apply_blocks(row, sx, sy);
                apply_pairs(row, rot);
            }
        }
        Ok(out)
    }

    pub fn rope(&self, z: &Tensor) -> Result<Tensor> {
        self.run(z, true)
    }

    pub fn unrope(&self, z: &Tensor) -> Result<Tensor> {
        self.run(z, false)
    }

    pub fn bind_rope(&self, g: &mut Graph, z: Var) -> Result<Var> {
        g.orthogonal(z, Box::new(self.clone()), false)
    }

    pub fn bind_unrope(&self, g: &mut Graph, z: Var) -> Result<Var> {
        g.orthogonal(z, Box::new(self.clone()), true)
    }
}

impl OrthogonalMap for StageEncoding {
    /// The encoding `M` is orthogonal, so `Mᵀ` is the unrope map.
    fn apply(&self, x: &Tensor, transpose: bool) -> Result<Tensor> {
        self.run(x, !transpose)
    }
}

pub fn stage_rope(z: &Tensor, cfg: &RopeConfig) -> Result<Tensor> {
    StageEncoding::new(*cfg).rope(z)
}

pub fn stage_unrope(z: &Tensor, cfg: &RopeConfig) -> Result<Tensor> {
    StageEncoding::new(*cfg).unrope(z)
}

/// Fixed sinusoidal absolute encoding `[N, N, T, C]`: the first half of the
/// channels encodes the flattened cell index `i·N + j`, the second half `t`.
pub fn absolute_encoding(n: usize, t: usize, c: usize, theta_base: f64) -> Tensor {
    let half = c / 2;
    Tensor::from_fn(&[n, n, t, c], |idx| {
        let (pos, k, width) = if idx[3] < half {
            ((idx[0] * n + idx[1]) as f64, idx[3], half)
        } else {
            (idx[2] as f64, idx[3] - half, c - half)
        };
        let pair = (k / 2) as f64;
        let freq = math::powf(theta_base, -2.0 * pair / width.max(1) as f64);
        if k % 2 == 0 {
            math::sin(pos * freq)
        } else {
            math::cos(pos * freq)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    fn mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        out
    }

    fn transpose(a: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
        [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
    }

    fn max_dev(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                m = m.max((a[i][j] - b[i][j]).abs());
            }
        }
        m
    }

    const I2: [[f64; 2]; 2] = [[1.0, 0.0], [0.0, 1.0]];

    #[test]
    fn reflection_is_orthogonal_and_involutory() {
        for a in [0.0, 0.3, PI / 2.0, 7.1] {
            let s = reflection(a);
            assert!(max_dev(&mul(&s, &transpose(&s)), &I2) < 1e-14);
            assert!(max_dev(&mul(&s, &s), &I2) < 1e-14);
        }
    }

    #[test]
    fn reflection_product_is_relative_rotation() {
        let theta = 0.37;
        let prod = mul(&reflection(2.0 * theta), &reflection(5.0 * theta));
        assert!(max_dev(&prod, &rotation(3.0 * theta)) < 1e-14);
        let (x, y) = mat2(&prod, 1.0, 0.0);
        let (rx, ry) = mat2(&rotation(3.0 * theta), 1.0, 0.0);
        assert!((x - rx).abs() < 1e-14 && (y - ry).abs() < 1e-14);
    }

    #[test]
    fn rope1d_position_zero_is_identity() {
        let cfg = RopeConfig::new(4);
        let x = Tensor::from_fn(&[1, 4], |i| i[1] as f64 + 1.0);
        assert_eq!(rope1d_apply(&x, &cfg, false).unwrap(), x);
    }

    #[test]
    fn rope1d_quarter_turn() {
        let m = rotation(PI / 2.0);
        let (a, b) = mat2(&m, 1.0, 0.0);
        assert!(a.abs() < 1e-15 && (b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn odd_channels_rejected() {
        let cfg = RopeConfig::new(3);
        assert!(matches!(rope1d_apply(&Tensor::zeros(&[2, 3]), &cfg, false), Err(Error::Config(_))));
        let cfg = RopeConfig::new(6);
        assert!(matches!(symrope_apply(&Tensor::zeros(&[2, 2, 6]), &cfg, false), Err(Error::Config(_))));
    }

    #[test]
    fn diagonal_cells_use_identical_blocks() {
        let cfg = RopeConfig::new(4);
        let freqs = cfg.spatial_freqs().unwrap();
        for x in 0..5 {
            let a = reflection(x as f64 * freqs[0]);
            let b = reflection(x as f64 * freqs[0]);
            assert_eq!(a, b);
        }
        // and on the tensor: a cell (x, x) with equal halves maps them equally
        let t = Tensor::from_fn(&[3, 3, 4], |i| if i[2] < 2 { (i[2] + 1) as f64 } else { (i[2] - 1) as f64 });
        let out = symrope_apply(&t, &cfg, false).unwrap();
        for x in 0..3 {
            assert_eq!(out.get(&[x, x, 0]), out.get(&[x, x, 2]));
            assert_eq!(out.get(&[x, x, 1]), out.get(&[x, x, 3]));
        }
    }

    #[test]
    fn stage_round_trip_and_zero() {
        let cfg = RopeConfig::new(8);
        let z = Tensor::from_fn(&[1, 4, 4, 3, 8], |i| ((i[1] * 7 + i[2] * 3 + i[3] * 5 + i[4]) % 11) as f64 - 5.0);
        let back = stage_unrope(&stage_rope(&z, &cfg).unwrap(), &cfg).unwrap();
        assert!(back.max_abs_diff(&z) < 1e-12);
        let zero = Tensor::zeros(&[1, 4, 4, 3, 8]);
        assert_eq!(stage_rope(&zero, &cfg).unwrap(), zero);
    }

    #[test]
    fn temporal_only_at_single_step_is_identity() {
        let cfg = RopeConfig::new(8);
        let enc = StageEncoding { cfg, temporal: true, spatial: false };
        let z = Tensor::from_fn(&[2, 2, 2, 1, 8], |i| (i[4] as f64) - 3.5 + i[1] as f64);
        assert_eq!(enc.rope(&z).unwrap(), z);
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(r: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
        (0..c).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    /// Temporal encoding of `v` at position `pos`.
    fn at_time(v: &[f64], pos: usize, cfg: &RopeConfig) -> Vec<f64> {
        let c = v.len();
        let x = Tensor::from_fn(&[pos + 1, c], |i| if i[0] == pos { v[i[1]] } else { 0.0 });
        rope1d_apply(&x, cfg, false).unwrap().data()[pos * c..].to_vec()
    }

    /// Spatial encoding of `v` at cell `(x, y)`.
    fn at_cell(v: &[f64], x: usize, y: usize, cfg: &RopeConfig) -> Vec<f64> {
        let (c, n) = (v.len(), x.max(y) + 1);
        let t = Tensor::from_fn(&[n, n, c], |i| if (i[0], i[1]) == (x, y) { v[i[2]] } else { 0.0 });
        let off = (x * n + y) * c;
        symrope_apply(&t, cfg, false).unwrap().data()[off..off + c].to_vec()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn relative_position_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let cfg = RopeConfig::new(8);
        for _ in 0..1000 {
            let (m, n) = (random_vec(&mut r, 8), random_vec(&mut r, 8));
            let (a, b) = (r.random_range(0..40usize), r.random_range(0..40usize));
            let lhs = dot(&at_time(&m, a, &cfg), &at_time(&n, b, &cfg));
            // ⟨R_a m, R_b n⟩ = ⟨m, R_{b-a} n⟩, with R_{-k} = R_k⁻¹
            let rel = if b >= a {
                at_time(&n, b - a, &cfg)
            } else {
                let x = Tensor::from_fn(&[a - b + 1, 8], |i| if i[0] == a - b { n[i[1]] } else { 0.0 });
                rope1d_apply(&x, &cfg, true).unwrap().data()[(a - b) * 8..].to_vec()
            };
            assert!((lhs - dot(&m, &rel)).abs() < 1e-12);
        }
    }

    #[test]
    fn interaction_depends_on_offset_only() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let cfg = RopeConfig::new(8);
        for _ in 0..200 {
            let (m, n) = (random_vec(&mut r, 8), random_vec(&mut r, 8));
            let (x, y) = (r.random_range(0..12usize), r.random_range(0..12usize));
            let s = r.random_range(0..12usize);
            // the pair (x, y) interacts with (x + s, y + s) the same way for every s
            let base = dot(&at_cell(&m, x, y, &cfg), &at_cell(&n, x + 3, y + 3, &cfg));
            let shifted = dot(&at_cell(&m, x + s, y + s, &cfg), &at_cell(&n, x + s + 3, y + s + 3, &cfg));
            assert!((base - shifted).abs() < 1e-12);
        }
    }

    #[test]
    fn symrope_is_an_involution_and_norm_preserving() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let cfg = RopeConfig::new(12);
        let x = Tensor::from_fn(&[2, 7, 7, 12], |_| r.random_range(-1.0..1.0));
        let once = symrope_apply(&x, &cfg, false).unwrap();
        assert!(symrope_apply(&once, &cfg, false).unwrap().max_abs_diff(&x) < 1e-12);
        assert_eq!(symrope_apply(&x, &cfg, true).unwrap(), once);
        assert!((once.norm() - x.norm()).abs() < 1e-12);

        let z = Tensor::from_fn(&[1, 4, 4, 3, 8], |_| r.random_range(-1.0..1.0));
        let cfg = RopeConfig::new(8);
        let enc = stage_rope(&z, &cfg).unwrap();
        assert!((enc.norm() - z.norm()).abs() < 1e-12);
        assert!(stage_unrope(&enc, &cfg).unwrap().max_abs_diff(&z) < 1e-12);
        let back = rope1d_apply(&rope1d_apply(&x, &RopeConfig::new(12), false).unwrap(), &RopeConfig::new(12), true).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn per_position_matrices_are_orthogonal() {
        let cfg = RopeConfig::new(8);
        let (tf, sf) = (cfg.temporal_freqs().unwrap(), cfg.spatial_freqs().unwrap());
        assert!(tf.windows(2).all(|w| w[1] < w[0]));
        assert!(sf.windows(2).all(|w| w[1] < w[0]));
        for p in 0..60 {
            for &f in tf.iter().chain(&sf) {
                let a = p as f64 * f;
                assert!(max_dev(&mul(&rotation(a), &transpose(&rotation(a))), &I2) < 1e-12);
                assert!(max_dev(&mul(&reflection(a), &transpose(&reflection(a))), &I2) < 1e-12);
            }
        }
    }

    #[test]
    fn absolute_encoding_is_bounded() {
        let pe = absolute_encoding(4, 3, 8, DEFAULT_THETA_BASE);
        assert_eq!(pe.shape(), &[4, 4, 3, 8]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(pe.get(&[0, 0, 0, 1]), 1.0);
    }
}
