//! Density and color voxel grid with emission-absorption rendering and
//! gradient-based fitting to posed frames.
//!
//! The grid stores `N^3` nodes spanning the bounding box (corner to corner).
//! Stored values are trilinearly interpolated, multiplied by the field's
//! `gain` and then activated: density by softplus (per meter), color by
//! sigmoid. Color is view independent.
//!
//! The gain sets how far one optimizer step moves the activations. With the
//! default of 10, Adam at lr `1e-3` moves logits by about `1e-2` per step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, Ray};
use crate::diffusion::{AdamState, DiffusionError};
use crate::hdr::{LdrImage, Rgb};
use crate::math::Vec3;
use crate::rng::CounterRng;

const MAGIC: &[u8; 4] = b"VXF1";
const CHANNELS: usize = 4;
pub const DEFAULT_GAIN: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("invalid field: {0}")]
    Invalid(String),
    #[error("invalid render config: {0}")]
    Config(String),
    #[error("no frames to fit")]
    EmptyFrames,
    #[error("{frames} frames but {cameras} cameras")]
    CountMismatch { frames: usize, cameras: usize },
    #[error("frame {index} is {got:?}, expected {want:?}")]
    FrameSize {
        index: usize,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("loss became non-finite at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Optimizer(#[from] DiffusionError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// The field's own background color.
    #[default]
    Field,
    White,
    Black,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    pub background: Background,
    /// Jitter sample positions within their strata.
    pub jitter: bool,
    pub seed: u64,
    /// Stop marching once transmittance drops below this; 0 disables.
    pub min_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples: 128,
            near: 0.0,
            far: 100.0,
            background: Background::Field,
            jitter: true,
            seed: 0,
            min_transmittance: 1e-4,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.samples < 2 {
            return Err(FieldError::Config(format!("samples {} < 2", self.samples)));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(FieldError::Config(format!("near {} must be < far {}", self.near, self.far)));
        }
        if !(0.0..1.0).contains(&self.min_transmittance) {
            return Err(FieldError::Config("min_transmittance must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    pub n: usize,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub background: [f64; 3],
    /// Scale from stored values to activation inputs.
    pub gain: f64,
    /// `[density, r, g, b]` stored values per node, x fastest, then y, then z.
    params: Vec<f64>,
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Node indices and trilinear weights for one point.
#[derive(Clone, Copy, Debug)]
struct Corners {
    base: usize,
    f: [f64; 3],
}

#[derive(Clone, Copy, Debug, Default)]
struct SampleRec {
    base: usize,
    f: [f64; 3],
    raw_sigma: f64,
    c: [f64; 3],
    alpha: f64,
    trans: f64,
}

/// Scratch state of one marched ray, reused across rays.
#[derive(Default)]
pub struct RayTrace {
    samples: Vec<SampleRec>,
    delta: f64,
    final_trans: f64,
    background: [f64; 3],
}

impl RayTrace {
    /// Sample weights `T_i alpha_i` of the last marched ray.
    pub fn weights(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.trans * s.alpha).collect()
    }

    pub fn final_transmittance(&self) -> f64 {
        self.final_trans
    }
}

impl VoxelField {
    /// Uniform field with [`DEFAULT_GAIN`]: every node at the given stored
    /// density and color values.
    pub fn new(n: usize, bbox_min: Vec3, bbox_max: Vec3, raw_density: f64, raw_color: [f64; 3], background: [f64; 3]) -> Result<Self, FieldError> {
        if n < 2 {
            return Err(FieldError::Invalid(format!("resolution {n} < 2")));
        }
        if (0..3).any(|k| !(bbox_max[k] > bbox_min[k])) || !bbox_min.is_finite() || !bbox_max.is_finite() {
            return Err(FieldError::Invalid("bounding box is degenerate".into()));
        }
        let mut params = Vec::with_capacity(n * n * n * CHANNELS);
        for _ in 0..n * n * n {
            params.push(raw_density);
            params.extend_from_slice(&raw_color);
        }
        Ok(Self {
            n,
            bbox_min,
            bbox_max,
            background,
            gain: DEFAULT_GAIN,
            params,
        })
    }

    pub fn with_gain(mut self, gain: f64) -> Result<Self, FieldError> {
        if !(gain.is_finite() && gain > 0.0) {
            return Err(FieldError::Invalid(format!("gain {gain} must be positive")));
        }
        self.gain = gain;
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n + j) * self.n + i
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = (self.bbox_max - self.bbox_min) / (self.n - 1) as f64;
        self.bbox_min + Vec3::new(i as f64 * s.x, j as f64 * s.y, k as f64 * s.z)
    }

    pub fn raw(&self, node: usize) -> [f64; 4] {
        let p = &self.params[node * CHANNELS..(node + 1) * CHANNELS];
        [p[0], p[1], p[2], p[3]]
    }

    pub fn set_raw(&mut self, node: usize, v: [f64; 4]) {
        self.params[node * CHANNELS..(node + 1) * CHANNELS].copy_from_slice(&v);
    }

    /// Sets every node from a function of its position.
    pub fn fill(&mut self, mut f: impl FnMut(Vec3) -> [f64; 4]) {
        for k in 0..self.n {
            for j in 0..self.n {
                for i in 0..self.n {
                    let node = self.node_index(i, j, k);
                    let v = f(self.node_position(i, j, k));
                    self.set_raw(node, v);
                }
            }
        }
    }

    #[inline]
    fn corners(&self, p: Vec3) -> Corners {
        let n1 = (self.n - 1) as f64;
        let mut idx = [0usize; 3];
        let mut f = [0.0; 3];
        for a in 0..3 {
            let g = ((p[a] - self.bbox_min[a]) / (self.bbox_max[a] - self.bbox_min[a]) * n1).clamp(0.0, n1);
            let i0 = (g.floor() as usize).min(self.n - 2);
            idx[a] = i0;
            f[a] = g - i0 as f64;
        }
        Corners {
            base: self.node_index(idx[0], idx[1], idx[2]),
            f,
        }
    }

    #[inline]
    fn corner_offsets(&self) -> [usize; 8] {
        let (sx, sy, sz) = (1, self.n, self.n * self.n);
        [0, sx, sy, sx + sy, sz, sz + sx, sz + sy, sz + sx + sy]
    }

    #[inline]
    fn corner_weights(f: [f64; 3]) -> [f64; 8] {
        let [fx, fy, fz] = f;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        [
            gx * gy * gz,
            fx * gy * gz,
            gx * fy * gz,
            fx * fy * gz,
            gx * gy * fz,
            fx * gy * fz,
            gx * fy * fz,
            fx * fy * fz,
        ]
    }

    /// Trilinearly interpolated stored values at `p` (clamped to the box).
    pub fn interpolate_raw(&self, p: Vec3) -> [f64; 4] {
        let c = self.corners(p);
        let w = Self::corner_weights(c.f);
        let off = self.corner_offsets();
        let mut out = [0.0; 4];
        for (o, wk) in off.iter().zip(w) {
            let q = &self.params[(c.base + o) * CHANNELS..(c.base + o + 1) * CHANNELS];
            for ch in 0..4 {
                out[ch] += wk * q[ch];
            }
        }
        out
    }

    /// Activated density and color at `p`.
    pub fn query(&self, p: Vec3) -> (f64, [f64; 3]) {
        let r = self.interpolate_raw(p).map(|v| v * self.gain);
        (softplus(r[0]), [sigmoid(r[1]), sigmoid(r[2]), sigmoid(r[3])])
    }

    /// Parametric interval of the ray inside the bounding box.
    fn clip(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let inv = 1.0 / ray.dir[a];
            let mut ta = (self.bbox_min[a] - ray.origin[a]) * inv;
            let mut tb = (self.bbox_max[a] - ray.origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 < t1).then_some((t0, t1))
    }

    fn background_for(&self, cfg: &RenderConfig) -> [f64; 3] {
        match cfg.background {
            Background::Field => self.background,
            Background::White => [1.0; 3],
            Background::Black => [0.0; 3],
        }
    }

    /// Marches one ray, filling `trace`, and returns its color.
    ///
    /// `key` selects the jitter stream for this ray.
    pub fn march(&self, ray: &Ray, cfg: &RenderConfig, key: u64, trace: &mut RayTrace) -> [f64; 3] {
        trace.samples.clear();
        trace.final_trans = 1.0;
        trace.background = self.background_for(cfg);
        let bg = trace.background;
        let Some((a, b)) = self.clip(ray) else {
            trace.delta = 0.0;
            return bg;
        };
        let t0 = a.max(cfg.near);
        let t1 = b.min(cfg.far);
        if t0 >= t1 {
            trace.delta = 0.0;
            return bg;
        }
        let s = cfg.samples;
        let delta = (t1 - t0) / s as f64;
        trace.delta = delta;
        let mut rng = CounterRng::new(&[cfg.seed, key]);
        let off = self.corner_offsets();
        let mut color = [0.0; 3];
        let mut trans = 1.0;
        for i in 0..s {
            let u = if cfg.jitter { rng.uniform() } else { 0.5 };
            let p = ray.at(t0 + (i as f64 + u) * delta);
            let c = self.corners(p);
            let w = Self::corner_weights(c.f);
            let mut raw = [0.0; 4];
            for (o, wk) in off.iter().zip(w) {
                let q = &self.params[(c.base + o) * CHANNELS..(c.base + o + 1) * CHANNELS];
                raw[0] += wk * q[0];
                raw[1] += wk * q[1];
                raw[2] += wk * q[2];
                raw[3] += wk * q[3];
            }
            let raw = raw.map(|v| v * self.gain);
            let sigma = softplus(raw[0]);
            let col = [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])];
            let alpha = 1.0 - (-sigma * delta).exp();
            let weight = trans * alpha;
            for k in 0..3 {
                color[k] += weight * col[k];
            }
            trace.samples.push(SampleRec {
                base: c.base,
                f: c.f,
                raw_sigma: raw[0],
                c: col,
                alpha,
                trans,
            });
            trans *= 1.0 - alpha;
            if trans < cfg.min_transmittance {
                break;
            }
        }
        trace.final_trans = trans;
        for k in 0..3 {
            color[k] += trans * bg[k];
        }
        color
    }

    pub fn render_ray(&self, ray: &Ray, cfg: &RenderConfig, key: u64) -> [f64; 3] {
        self.march(ray, cfg, key, &mut RayTrace::default())
    }

    /// Accumulates `d(loss)/d(params)` for the last marched ray into `grad`,
    /// given `d(loss)/d(color)`.
    pub fn backward(&self, trace: &RayTrace, dcolor: [f64; 3], grad: &mut [f64]) {
        let off = self.corner_offsets();
        let dot = |c: [f64; 3]| c[0] * dcolor[0] + c[1] * dcolor[1] + c[2] * dcolor[2];
        // suffix: sum_{j > i} w_j (c_j . g) + T_final (bg . g)
        let mut suffix = trace.final_trans * dot(trace.background);
        for s in trace.samples.iter().rev() {
            let w = s.trans * s.alpha;
            let cg = dot(s.c);
            let t_next = s.trans * (1.0 - s.alpha);
            let d_sigma = trace.delta * (t_next * cg - suffix);
            suffix += w * cg;
            let d_raw_sigma = d_sigma * sigmoid(s.raw_sigma) * self.gain;
            let mut d_raw_c = [0.0; 3];
            for k in 0..3 {
                d_raw_c[k] = w * dcolor[k] * s.c[k] * (1.0 - s.c[k]) * self.gain;
            }
            let cw = Self::corner_weights(s.f);
            for (o, wk) in off.iter().zip(cw) {
                let g = &mut grad[(s.base + o) * CHANNELS..(s.base + o + 1) * CHANNELS];
                g[0] += wk * d_raw_sigma;
                g[1] += wk * d_raw_c[0];
                g[2] += wk * d_raw_c[1];
                g[3] += wk * d_raw_c[2];
            }
        }
    }

    /// Renders a view; pixels outside the image circle are black.
    pub fn render_view(&self, camera: &Camera, cfg: &RenderConfig) -> Result<LdrImage, FieldError> {
        cfg.validate()?;
        let (w, h) = (camera.width(), camera.height());
        let rows: Vec<Vec<Rgb>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut trace = RayTrace::default();
                (0..w)
                    .map(|x| match camera.ray([x as f64 + 0.5, y as f64 + 0.5]) {
                        Ok(ray) => {
                            let c = self.march(&ray, cfg, (y * w + x) as u64, &mut trace);
                            c.map(|v| v.clamp(0.0, 1.0) as f32)
                        }
                        Err(_) => [0.0; 3],
                    })
                    .collect()
            })
            .collect();
        LdrImage::from_pixels(w, h, rows.concat()).map_err(|e| FieldError::Invalid(e.to_string()))
    }

    /// Binary checkpoint: `VXF1`, u32 N, then f64 bbox min (3), bbox max
    /// (3), background (3) and gain, then `4 N^3` stored f64 values
    /// (`[density, r, g, b]` per node, x fastest), all little-endian.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        let header = self.bbox_min.to_array().into_iter().chain(self.bbox_max.to_array()).chain(self.background).chain([self.gain]);
        for v in header {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, FieldError> {
        let bad = |m: String| FieldError::Checkpoint(m);
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = 8 + 10 * 8;
        let count = n.checked_pow(3).and_then(|c| c.checked_mul(CHANNELS)).ok_or_else(|| bad("size overflow".into()))?;
        if bytes.len() != header + count * 8 {
            return Err(bad(format!("expected {} bytes, found {}", header + count * 8, bytes.len())));
        }
        let f = |i: usize| f64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let bbox_min = Vec3::new(f(0), f(1), f(2));
        let bbox_max = Vec3::new(f(3), f(4), f(5));
        let background = [f(6), f(7), f(8)];
        let mut field = Self::new(n, bbox_min, bbox_max, 0.0, [0.0; 3], background)?.with_gain(f(9))?;
        for (p, b) in field.params.iter_mut().zip(bytes[header..].chunks_exact(8)) {
            *p = f64::from_le_bytes(b.try_into().unwrap());
        }
        Ok(field)
    }
}

/// One pixel to fit: its ray, target color and jitter key.
#[derive(Clone, Copy, Debug)]
pub struct TrainRay {
    pub ray: Ray,
    pub target: [f64; 3],
    pub key: u64,
}

/// Rays through every in-circle pixel center of every frame. Jitter keys
/// are `frame * pixels + pixel`.
pub fn collect_rays(frames: &[LdrImage], cameras: &[Camera]) -> Result<Vec<TrainRay>, FieldError> {
    if frames.is_empty() {
        return Err(FieldError::EmptyFrames);
    }
    if frames.len() != cameras.len() {
        return Err(FieldError::CountMismatch {
            frames: frames.len(),
            cameras: cameras.len(),
        });
    }
    let want = frames[0].dims();
    let mut rays = Vec::new();
    for (index, (frame, cam)) in frames.iter().zip(cameras).enumerate() {
        let got = frame.dims();
        if got != want || (cam.width(), cam.height()) != got {
            return Err(FieldError::FrameSize { index, got, want });
        }
        let (w, h) = got;
        for y in 0..h {
            for x in 0..w {
                if let Ok(ray) = cam.ray([x as f64 + 0.5, y as f64 + 0.5]) {
                    rays.push(TrainRay {
                        ray,
                        target: frame.get(x, y).map(|v| v as f64),
                        key: (index * w * h + y * w + x) as u64,
                    });
                }
            }
        }
    }
    Ok(rays)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub iters: usize,
    pub lr: f64,
    pub rays_per_iter: usize,
    pub seed: u64,
    pub render: RenderConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            lr: 1e-3,
            rays_per_iter: 8192,
            seed: 0,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillLog {
    /// Mean squared error of each iteration's ray batch, before its update.
    pub loss: Vec<f64>,
}

/// Mean squared error (per channel) of `rays` and its parameter gradient.
pub fn loss_and_grad(field: &VoxelField, rays: &[TrainRay], cfg: &RenderConfig, grad: &mut [f64]) -> f64 {
    let mut trace = RayTrace::default();
    let scale = 1.0 / (3 * rays.len().max(1)) as f64;
    let mut loss = 0.0;
    for r in rays {
        let c = field.march(&r.ray, cfg, r.key, &mut trace);
        let mut d = [0.0; 3];
        for k in 0..3 {
            let e = c[k] - r.target[k];
            loss += e * e * scale;
            d[k] = 2.0 * e * scale;
        }
        field.backward(&trace, d, grad);
    }
    loss
}

/// Fits `field` to the frames by Adam on random ray batches.
///
/// Deterministic in `cfg.seed`. Gradients are accumulated ray by ray in
/// batch order so results do not depend on the thread count.
pub fn distill(field: &mut VoxelField, frames: &[LdrImage], cameras: &[Camera], cfg: &DistillConfig) -> Result<DistillLog, FieldError> {
    cfg.render.validate()?;
    let rays = collect_rays(frames, cameras)?;
    distill_rays(field, &rays, cfg)
}

pub fn distill_rays(field: &mut VoxelField, rays: &[TrainRay], cfg: &DistillConfig) -> Result<DistillLog, FieldError> {
    if rays.is_empty() {
        return Err(FieldError::EmptyFrames);
    }
    let mut adam = AdamState::new(field.params.len());
    let mut grad = vec![0.0; field.params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batch = Vec::with_capacity(cfg.rays_per_iter);
    let mut log = DistillLog::default();
    for it in 0..cfg.iters {
        batch.clear();
        batch.extend((0..cfg.rays_per_iter).map(|_| rays[rng.gen_range(0..rays.len())]));
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = loss_and_grad(field, &batch, &cfg.render, &mut grad);
        if !loss.is_finite() {
            return Err(FieldError::NonFiniteLoss(it));
        }
        log.loss.push(loss);
        adam.step(&mut field.params, &grad, cfg.lr)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_field(n: usize, raw_density: f64) -> VoxelField {
        VoxelField::new(n, Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0), raw_density, [0.0; 3], [1.0; 3])
            .unwrap()
            .with_gain(1.0)
            .unwrap()
    }

    fn axis_ray(y: f64, z: f64) -> Ray {
        Ray {
            origin: Vec3::new(-0.5, y, z),
            dir: Vec3::new(1.0, 0.0, 0.0),
        }
    }

    #[test]
    fn empty_field_renders_background() {
        let f = unit_field(4, -1000.0);
        let cfg = RenderConfig::default();
        assert_eq!(f.render_ray(&axis_ray(0.5, 0.5), &cfg, 0), [1.0; 3]);
        let miss = Ray {
            origin: Vec3::new(-1.0, 5.0, 0.5),
            dir: Vec3::new(1.0, 0.0, 0.0),
        };
        assert_eq!(f.render_ray(&miss, &cfg, 0), [1.0; 3]);
    }

    #[test]
    fn homogeneous_slab_matches_closed_form() {
        // softplus(raw) = 2 per meter, color sigmoid(0.4), white background
        let raw = (2f64.exp() - 1.0).ln();
        let mut f = unit_field(5, raw);
        f.fill(|_| [raw, 0.4, 0.4, 0.4]);
        let cfg = RenderConfig {
            min_transmittance: 0.0,
            ..RenderConfig::default()
        };
        let c = f.render_ray(&axis_ray(0.3, 0.7), &cfg, 3);
        let col = sigmoid(0.4);
        let want = col * (1.0 - (-2.0f64).exp()) + (-2.0f64).exp();
        for v in c {
            assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        }
    }

    #[test]
    fn weights_are_a_subdistribution() {
        let mut f = unit_field(6, 0.0);
        let mut rng = CounterRng::new(&[4]);
        f.fill(|_| [rng.normal() * 3.0, 0.0, 0.0, 0.0]);
        let mut trace = RayTrace::default();
        let cfg = RenderConfig::default();
        for k in 0..20 {
            let ray = axis_ray(0.05 * k as f64, 0.5);
            f.march(&ray, &cfg, k, &mut trace);
            let w = trace.weights();
            assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let s: f64 = w.iter().sum();
            assert!((s - (1.0 - trace.final_transmittance())).abs() < 1e-12);
        }
    }

    #[test]
    fn trilinear_is_exact_on_affine_fields() {
        let mut f = VoxelField::new(7, Vec3::new(-1.0, 0.0, 2.0), Vec3::new(2.0, 1.5, 3.0), 0.0, [0.0; 3], [0.0; 3]).unwrap();
        let affine = |p: Vec3| [0.3 * p.x - 1.2 * p.y + 0.7 * p.z + 0.1, p.x, -2.0 * p.y + 0.5, p.z * 0.25];
        f.fill(affine);
        let mut rng = CounterRng::new(&[11]);
        for _ in 0..200 {
            let p = Vec3::new(-1.0 + 3.0 * rng.uniform(), 1.5 * rng.uniform(), 2.0 + rng.uniform());
            let got = f.interpolate_raw(p);
            let want = affine(p);
            for k in 0..4 {
                assert!((got[k] - want[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut f = unit_field(3, 0.5).with_gain(7.5).unwrap();
        f.set_raw(5, [1.0, -2.0, 3.0, 0.25]);
        let back = VoxelField::from_checkpoint(&f.to_checkpoint()).unwrap();
        assert_eq!(back, f);
        assert!(VoxelField::from_checkpoint(b"VXF1").is_err());
    }

    #[test]
    fn render_config_validation() {
        let bad = RenderConfig {
            samples: 1,
            ..RenderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RenderConfig {
            near: 2.0,
            far: 1.0,
            ..RenderConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
