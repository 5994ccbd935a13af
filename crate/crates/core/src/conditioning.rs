//! Conditioning signals for the relighting model.
//!
//! * [`ConditionVideo`]: per-pixel target light colors, with `(-1, -1, -1)`
//!   meaning "leave this pixel's light as it is".
//! * Light annotation: pixels picked in one view are lifted to 3D with a
//!   depth map and splatted back into every frame with an occlusion test.
//! * Sun intensity embedding: Fourier features followed by a two-layer MLP.
//! * Token packing: three videos concatenated along time with axial 3D
//!   rotary position encodings, or concatenated along channels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Camera;
use crate::hdr::{read_pfm_raw, write_pfm_raw, PfmError, Rgb};
use crate::mask::Mask;
use crate::math::Vec3;
use crate::scene::DepthMap;

pub const SENTINEL: Rgb = [-1.0, -1.0, -1.0];
pub const DEFAULT_ANNOTATION_RADIUS: f64 = 3.0;
/// Relative depth slack for the annotation occlusion test.
pub const OCCLUSION_TOLERANCE: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum ConditionError {
    #[error("frame {frame}, pixel {pixel}: {value:?} is neither the sentinel nor non-negative")]
    MixedPixel { frame: usize, pixel: usize, value: Rgb },
    #[error("frame {frame}: masks of lights {a} and {b} overlap")]
    OverlappingMasks { frame: usize, a: u32, b: u32 },
    #[error("light {0} is edited but has no visibility masks")]
    MissingMask(u32),
    #[error("light {id}: expected {expected} mask frames, got {got}")]
    FrameCount { id: u32, expected: usize, got: usize },
    #[error("mask size {got:?} differs from video size {want:?}")]
    MaskSize { got: (usize, usize), want: (usize, usize) },
    #[error("edit color for light {id} must be finite and non-negative, got {value:?}")]
    BadColor { id: u32, value: Rgb },
    #[error("pixel ({x}, {y}) has no finite depth")]
    InfiniteDepth { x: usize, y: usize },
    #[error("pixel ({x}, {y}) is outside the image")]
    PixelOutOfBounds { x: usize, y: usize },
    #[error("feature dimension {0} must be even")]
    OddDimension(usize),
    #[error("rope axis split {split:?} does not sum to feature dimension {dim}")]
    AxisSplit { split: [usize; 3], dim: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Pfm(#[from] PfmError),
}

/// `T x H x W x 3` target intensities, row-major per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVideo {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    data: Vec<Rgb>,
}

impl ConditionVideo {
    pub fn sentinel(frames: usize, width: usize, height: usize) -> Self {
        Self {
            frames,
            width,
            height,
            data: vec![SENTINEL; frames * width * height],
        }
    }

    pub fn from_data(frames: usize, width: usize, height: usize, data: Vec<Rgb>) -> Result<Self, ConditionError> {
        if data.len() != frames * width * height {
            return Err(ConditionError::Shape(format!(
                "{} values for {frames}x{height}x{width}",
                data.len()
            )));
        }
        let v = Self {
            frames,
            width,
            height,
            data,
        };
        v.validate()?;
        Ok(v)
    }

    /// Every pixel is exactly the sentinel or componentwise `>= 0`.
    pub fn validate(&self) -> Result<(), ConditionError> {
        let n = self.width * self.height;
        for (i, &p) in self.data.iter().enumerate() {
            let ok = p == SENTINEL || p.iter().all(|&v| v.is_finite() && v >= 0.0);
            if !ok {
                return Err(ConditionError::MixedPixel {
                    frame: i / n,
                    pixel: i % n,
                    value: p,
                });
            }
        }
        Ok(())
    }

    pub fn frame(&self, t: usize) -> &[Rgb] {
        let n = self.width * self.height;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn get(&self, t: usize, x: usize, y: usize) -> Rgb {
        self.data[(t * self.height + y) * self.width + x]
    }

    pub fn is_all_sentinel(&self) -> bool {
        self.data.iter().all(|&p| p == SENTINEL)
    }

    pub fn edited_count(&self, t: usize) -> usize {
        self.frame(t).iter().filter(|&&p| p != SENTINEL).count()
    }

    pub fn frame_to_pfm(&self, t: usize) -> Vec<u8> {
        write_pfm_raw(self.width, self.height, self.frame(t))
    }

    pub fn from_pfm_frames(frames: &[Vec<u8>]) -> Result<Self, ConditionError> {
        let mut data = Vec::new();
        let mut dims = None;
        for bytes in frames {
            let (w, h, px) = read_pfm_raw(bytes)?;
            if *dims.get_or_insert((w, h)) != (w, h) {
                return Err(ConditionError::Shape("frames differ in size".into()));
            }
            data.extend(px);
        }
        let (w, h) = dims.unwrap_or((0, 0));
        Self::from_data(frames.len(), w, h, data)
    }
}

/// Paints each edited light's target color onto its visible pixels; all
/// other pixels carry the sentinel.
pub fn build_condition_video(
    masks: &BTreeMap<u32, Vec<Mask>>,
    edits: &BTreeMap<u32, Rgb>,
    frames: usize,
    width: usize,
    height: usize,
) -> Result<ConditionVideo, ConditionError> {
    for (&id, &c) in edits {
        if !c.iter().all(|&v| v.is_finite() && v >= 0.0) {
            return Err(ConditionError::BadColor { id, value: c });
        }
        let m = masks.get(&id).ok_or(ConditionError::MissingMask(id))?;
        if m.len() != frames {
            return Err(ConditionError::FrameCount {
                id,
                expected: frames,
                got: m.len(),
            });
        }
        if let Some(bad) = m.iter().find(|m| (m.width, m.height) != (width, height)) {
            return Err(ConditionError::MaskSize {
                got: (bad.width, bad.height),
                want: (width, height),
            });
        }
    }
    let mut video = ConditionVideo::sentinel(frames, width, height);
    let n = width * height;
    let mut owner: Vec<Option<u32>> = vec![None; n];
    for t in 0..frames {
        owner.iter_mut().for_each(|o| *o = None);
        for (&id, &c) in edits {
            let mask = &masks[&id][t];
            for (i, &bit) in mask.bits().iter().enumerate() {
                if !bit {
                    continue;
                }
                if let Some(a) = owner[i] {
                    return Err(ConditionError::OverlappingMasks { frame: t, a, b: id });
                }
                owner[i] = Some(id);
                video.data[t * n + i] = c;
            }
        }
    }
    Ok(video)
}

/// Lifts selected pixel centers to 3D points along their camera rays.
pub fn backproject_annotations(
    pixels: &[[usize; 2]],
    depth: &DepthMap,
    camera: &Camera,
) -> Result<Vec<Vec3>, ConditionError> {
    pixels
        .iter()
        .map(|&[x, y]| {
            if x >= depth.width || y >= depth.height {
                return Err(ConditionError::PixelOutOfBounds { x, y });
            }
            let d = depth.get(x, y);
            if !d.is_finite() {
                return Err(ConditionError::InfiniteDepth { x, y });
            }
            let ray = camera
                .ray([x as f64 + 0.5, y as f64 + 0.5])
                .map_err(|_| ConditionError::InfiniteDepth { x, y })?;
            Ok(ray.at(d))
        })
        .collect()
}

/// Per-frame masks of pixels within `radius` pixels of a visible point.
///
/// A point counts as visible in a frame when its distance from the camera
/// does not exceed that frame's depth at the projected pixel by more than
/// [`OCCLUSION_TOLERANCE`] of the depth.
pub fn render_annotation_masks(points: &[Vec3], views: &[(Camera, DepthMap)], radius: f64) -> Vec<Mask> {
    views
        .iter()
        .map(|(camera, depth)| {
            let (w, h) = (camera.width(), camera.height());
            let mut mask = Mask::empty(w, h);
            for &p in points {
                let Ok(center) = camera.project(p) else { continue };
                let cx = center[0].floor();
                let cy = center[1].floor();
                if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
                    continue;
                }
                let d_scene = depth.get(cx as usize, cy as usize);
                let d_point = (p - camera.pose.position).length();
                if d_point > d_scene * (1.0 + OCCLUSION_TOLERANCE) {
                    continue;
                }
                let x0 = (center[0] - radius).floor().max(0.0) as usize;
                let y0 = (center[1] - radius).floor().max(0.0) as usize;
                let x1 = ((center[0] + radius).ceil() as usize).min(w - 1);
                let y1 = ((center[1] + radius).ceil() as usize).min(h - 1);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let dx = x as f64 + 0.5 - center[0];
                        let dy = y as f64 + 0.5 - center[1];
                        if dx.hypot(dy) <= radius && camera.intrinsics.pixel_center_inside(x, y) {
                            mask.set(x, y, true);
                        }
                    }
                }
            }
            mask
        })
        .collect()
}

/// `[sin(2^k pi s), cos(2^k pi s)]` for `k = 0..bands`, interleaved.
pub fn fourier_features(s: f64, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * bands);
    for k in 0..bands {
        let a = (1u64 << k) as f64 * std::f64::consts::PI * s;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

/// Derivative of [`fourier_features`] with respect to `s`.
pub fn fourier_features_grad(s: f64, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * bands);
    for k in 0..bands {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        let a = f * s;
        out.push(f * a.cos());
        out.push(-f * a.sin());
    }
    out
}

/// Two-layer tanh MLP `2K -> D -> D` embedding the sun intensity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SunMlp {
    pub bands: usize,
    pub dim: usize,
    /// `dim x 2*bands`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `dim x dim`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl SunMlp {
    pub fn zeros(bands: usize, dim: usize) -> Self {
        Self {
            bands,
            dim,
            w1: vec![0.0; dim * 2 * bands],
            b1: vec![0.0; dim],
            w2: vec![0.0; dim * dim],
            b2: vec![0.0; dim],
        }
    }

    /// Weights drawn from `N(0, 1/fan_in)`.
    pub fn random(bands: usize, dim: usize, seed: u64) -> Self {
        let mut rng = crate::rng::CounterRng::new(&[seed, 0x5E4]);
        let mut m = Self::zeros(bands, dim);
        let s1 = (1.0 / (2 * bands) as f64).sqrt();
        let s2 = (1.0 / dim as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = rng.normal() * s1);
        m.w2.iter_mut().for_each(|w| *w = rng.normal() * s2);
        m
    }

    fn check(&self, ff: &[f64]) -> Result<(), ConditionError> {
        let k2 = 2 * self.bands;
        if ff.len() != k2
            || self.w1.len() != self.dim * k2
            || self.b1.len() != self.dim
            || self.w2.len() != self.dim * self.dim
            || self.b2.len() != self.dim
        {
            return Err(ConditionError::Shape(format!(
                "sun MLP {}->{}->{} given {} features",
                k2,
                self.dim,
                self.dim,
                ff.len()
            )));
        }
        Ok(())
    }

    /// First affine layer before the nonlinearity.
    pub fn first_layer(&self, ff: &[f64]) -> Result<Vec<f64>, ConditionError> {
        self.check(ff)?;
        let k2 = ff.len();
        Ok((0..self.dim)
            .map(|i| self.b1[i] + (0..k2).map(|j| self.w1[i * k2 + j] * ff[j]).sum::<f64>())
            .collect())
    }

    pub fn forward(&self, ff: &[f64]) -> Result<Vec<f64>, ConditionError> {
        let h: Vec<f64> = self.first_layer(ff)?.into_iter().map(f64::tanh).collect();
        Ok((0..self.dim)
            .map(|i| self.b2[i] + (0..self.dim).map(|j| self.w2[i * self.dim + j] * h[j]).sum::<f64>())
            .collect())
    }

    pub fn embed(&self, s: f64) -> Result<Vec<f64>, ConditionError> {
        self.forward(&fourier_features(s, self.bands))
    }

    /// Embedding and its derivative with respect to `s`.
    pub fn embed_with_grad(&self, s: f64) -> Result<(Vec<f64>, Vec<f64>), ConditionError> {
        let ff = fourier_features(s, self.bands);
        let dff = fourier_features_grad(s, self.bands);
        let pre = self.first_layer(&ff)?;
        let k2 = ff.len();
        let h: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let dh: Vec<f64> = (0..self.dim)
            .map(|i| {
                let dpre: f64 = (0..k2).map(|j| self.w1[i * k2 + j] * dff[j]).sum();
                (1.0 - h[i] * h[i]) * dpre
            })
            .collect();
        let mut out = vec![0.0; self.dim];
        let mut grad = vec![0.0; self.dim];
        for i in 0..self.dim {
            let row = &self.w2[i * self.dim..(i + 1) * self.dim];
            out[i] = self.b2[i] + row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>();
            grad[i] = row.iter().zip(&dh).map(|(w, v)| w * v).sum::<f64>();
        }
        Ok((out, grad))
    }
}

/// Axial rotary encoding: the feature vector is split into contiguous
/// `[t | h | w]` blocks, each rotated pairwise by its own axis position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub axis_dims: [usize; 3],
    pub base: f64,
}

impl RopeConfig {
    /// Splits `dim` (even) as evenly as possible into three even blocks.
    pub fn for_dim(dim: usize) -> Result<Self, ConditionError> {
        if dim % 2 != 0 {
            return Err(ConditionError::OddDimension(dim));
        }
        let pairs = dim / 2;
        let t = pairs - 2 * (pairs / 3);
        Ok(Self {
            axis_dims: [2 * t, 2 * (pairs / 3), 2 * (pairs / 3)],
            base: 10_000.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.axis_dims.iter().sum()
    }

    fn check(&self, dim: usize) -> Result<(), ConditionError> {
        if dim % 2 != 0 {
            return Err(ConditionError::OddDimension(dim));
        }
        if self.axis_dims.iter().any(|d| d % 2 != 0) {
            return Err(ConditionError::OddDimension(*self.axis_dims.iter().find(|d| *d % 2 != 0).unwrap()));
        }
        if self.dim() != dim {
            return Err(ConditionError::AxisSplit {
                split: self.axis_dims,
                dim,
            });
        }
        Ok(())
    }
}

/// Rotates consecutive feature pairs by `position[axis] * base^(-2j/d_axis)`.
pub fn rope_apply(v: &[f64], position: [i64; 3], cfg: &RopeConfig) -> Result<Vec<f64>, ConditionError> {
    cfg.check(v.len())?;
    let mut out = v.to_vec();
    let mut offset = 0;
    for (axis, &d) in cfg.axis_dims.iter().enumerate() {
        for j in 0..d / 2 {
            let freq = cfg.base.powf(-((2 * j) as f64) / d as f64);
            let (s, c) = (position[axis] as f64 * freq).sin_cos();
            let i = offset + 2 * j;
            let (a, b) = (v[i], v[i + 1]);
            out[i] = a * c - b * s;
            out[i + 1] = a * s + b * c;
        }
        offset += d;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Target,
    Input,
    Condition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub features: Vec<f64>,
    /// `(t, h, w)`.
    pub position: [i64; 3],
    pub stream: Stream,
}

/// `T x H x W` grid of `dim`-dimensional feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TokenGrid {
    pub fn new(frames: usize, height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self, ConditionError> {
        if data.len() != frames * height * width * dim {
            return Err(ConditionError::Shape(format!(
                "{} values for a {frames}x{height}x{width}x{dim} grid",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            dim,
            data,
        })
    }

    pub fn token(&self, t: usize, y: usize, x: usize) -> &[f64] {
        let i = ((t * self.height + y) * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    fn same_grid(&self, other: &TokenGrid) -> bool {
        (self.frames, self.height, self.width) == (other.frames, other.height, other.width)
    }

    /// Non-overlapping `patch x patch` patches of a video of RGB frames,
    /// flattened to `3 * patch^2` features.
    pub fn patchify(frames: &[Vec<Rgb>], width: usize, height: usize, patch: usize) -> Result<Self, ConditionError> {
        if patch == 0 || width % patch != 0 || height % patch != 0 {
            return Err(ConditionError::Shape(format!("{width}x{height} not divisible into {patch}px patches")));
        }
        let (gw, gh) = (width / patch, height / patch);
        let dim = 3 * patch * patch;
        let mut data = Vec::with_capacity(frames.len() * gw * gh * dim);
        for f in frames {
            if f.len() != width * height {
                return Err(ConditionError::Shape("frame size mismatch".into()));
            }
            for py in 0..gh {
                for px in 0..gw {
                    for y in 0..patch {
                        for x in 0..patch {
                            let p = f[(py * patch + y) * width + px * patch + x];
                            data.extend(p.iter().map(|&v| v as f64));
                        }
                    }
                }
            }
        }
        Self::new(frames.len(), gh, gw, dim, data)
    }
}

/// Concatenates the three videos along time: target at `[0, T)`, input at
/// `[T, 2T)`, condition at `[2T, 3T)`. Positions are rotary-encoded into
/// the features when `rope` is given.
pub fn pack_temporal(
    target: &TokenGrid,
    input: &TokenGrid,
    condition: &TokenGrid,
    rope: Option<&RopeConfig>,
) -> Result<Vec<Token>, ConditionError> {
    if !target.same_grid(input) || !target.same_grid(condition) {
        return Err(ConditionError::Shape("streams have different grids".into()));
    }
    let t_len = target.frames as i64;
    let mut out = Vec::with_capacity(3 * target.frames * target.height * target.width);
    for (k, (grid, stream)) in [(target, Stream::Target), (input, Stream::Input), (condition, Stream::Condition)]
        .into_iter()
        .enumerate()
    {
        for t in 0..grid.frames {
            for y in 0..grid.height {
                for x in 0..grid.width {
                    let position = [k as i64 * t_len + t as i64, y as i64, x as i64];
                    let f = grid.token(t, y, x);
                    let features = match rope {
                        Some(cfg) => rope_apply(f, position, cfg)?,
                        None => f.to_vec(),
                    };
                    out.push(Token {
                        features,
                        position,
                        stream,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pack_temporal`] (without rope): the three grids.
pub fn unpack_temporal(tokens: &[Token], frames: usize, height: usize, width: usize) -> Result<[TokenGrid; 3], ConditionError> {
    let per = frames * height * width;
    if tokens.len() != 3 * per {
        return Err(ConditionError::Shape(format!("{} tokens for 3 streams of {per}", tokens.len())));
    }
    let dim = tokens.first().map_or(0, |t| t.features.len());
    let mut data = [vec![0.0; per * dim], vec![0.0; per * dim], vec![0.0; per * dim]];
    let mut seen = [vec![false; per], vec![false; per], vec![false; per]];
    for tok in tokens {
        let k = tok.stream as usize;
        let t = tok.position[0] - (k * frames) as i64;
        let [_, y, x] = tok.position;
        if t < 0 || t >= frames as i64 || y < 0 || y >= height as i64 || x < 0 || x >= width as i64 || tok.features.len() != dim {
            return Err(ConditionError::Shape(format!("token at {:?} is outside its stream", tok.position)));
        }
        let i = (t as usize * height + y as usize) * width + x as usize;
        if seen[k][i] {
            return Err(ConditionError::Shape(format!("duplicate token at {:?}", tok.position)));
        }
        seen[k][i] = true;
        data[k][i * dim..(i + 1) * dim].copy_from_slice(&tok.features);
    }
    let [a, b, c] = data;
    Ok([
        TokenGrid::new(frames, height, width, dim, a)?,
        TokenGrid::new(frames, height, width, dim, b)?,
        TokenGrid::new(frames, height, width, dim, c)?,
    ])
}

/// Ablation arm: one token per position with the three feature vectors
/// concatenated (target, input, condition).
pub fn pack_channelwise(target: &TokenGrid, input: &TokenGrid, condition: &TokenGrid) -> Result<Vec<Token>, ConditionError> {
    if !target.same_grid(input) || !target.same_grid(condition) {
        return Err(ConditionError::Shape("streams have different grids".into()));
    }
    let mut out = Vec::with_capacity(target.frames * target.height * target.width);
    for t in 0..target.frames {
        for y in 0..target.height {
            for x in 0..target.width {
                let mut features = target.token(t, y, x).to_vec();
                features.extend_from_slice(input.token(t, y, x));
                features.extend_from_slice(condition.token(t, y, x));
                out.push(Token {
                    features,
                    position: [t as i64, y as i64, x as i64],
                    stream: Stream::Target,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(w: usize, h: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::empty(w, h);
        for &(x, y) in on {
            m.set(x, y, true);
        }
        m
    }

    #[test]
    fn empty_edits_give_all_sentinel() {
        let v = build_condition_video(&BTreeMap::new(), &BTreeMap::new(), 3, 4, 4).unwrap();
        assert!(v.is_all_sentinel());
    }

    #[test]
    fn single_edit_marks_exactly_masked_pixels() {
        let masks = BTreeMap::from([(1, vec![mask_with(4, 3, &[(1, 1), (2, 1)])])]);
        let edits = BTreeMap::from([(1, [1.0, 0.5, 0.0])]);
        let v = build_condition_video(&masks, &edits, 1, 4, 3).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let want = if y == 1 && (x == 1 || x == 2) { [1.0, 0.5, 0.0] } else { SENTINEL };
                assert_eq!(v.get(0, x, y), want);
            }
        }
    }

    #[test]
    fn overlapping_and_missing_masks_rejected() {
        let masks = BTreeMap::from([(1, vec![mask_with(2, 2, &[(0, 0)])]), (2, vec![mask_with(2, 2, &[(0, 0)])])]);
        let edits = BTreeMap::from([(1, [1.0; 3]), (2, [0.5; 3])]);
        assert!(matches!(
            build_condition_video(&masks, &edits, 1, 2, 2),
            Err(ConditionError::OverlappingMasks { frame: 0, a: 1, b: 2 })
        ));
        let edits = BTreeMap::from([(3, [1.0; 3])]);
        assert_eq!(build_condition_video(&masks, &edits, 1, 2, 2), Err(ConditionError::MissingMask(3)));
    }

    #[test]
    fn sentinel_purity() {
        assert!(ConditionVideo::from_data(1, 1, 1, vec![[-1.0, -1.0, -1.0]]).is_ok());
        assert!(ConditionVideo::from_data(1, 1, 1, vec![[0.0, 2.0, 0.5]]).is_ok());
        assert!(matches!(
            ConditionVideo::from_data(1, 2, 1, vec![[0.0; 3], [-1.0, 0.0, -1.0]]),
            Err(ConditionError::MixedPixel { frame: 0, pixel: 1, .. })
        ));
        assert!(ConditionVideo::from_data(1, 1, 1, vec![[-0.5, -0.5, -0.5]]).is_err());
    }

    #[test]
    fn condition_pfm_roundtrip_keeps_sentinel() {
        let masks = BTreeMap::from([(1, vec![mask_with(3, 2, &[(2, 1)]); 2])]);
        let v = build_condition_video(&masks, &BTreeMap::from([(1, [0.25, 0.5, 1.0])]), 2, 3, 2).unwrap();
        let frames: Vec<_> = (0..2).map(|t| v.frame_to_pfm(t)).collect();
        assert_eq!(ConditionVideo::from_pfm_frames(&frames).unwrap(), v);
    }

    #[test]
    fn fourier_features_basics() {
        let f = fourier_features(0.0, 8);
        assert_eq!(f.len(), 16);
        for k in 0..8 {
            assert_eq!(f[2 * k], 0.0);
            assert_eq!(f[2 * k + 1], 1.0);
        }
        let f = fourier_features(1.0, 8);
        assert!(f[0].abs() < 1e-15 && f[1] == -1.0);
        let f = fourier_features(0.37, 8);
        for k in 0..8 {
            assert!((f[2 * k].hypot(f[2 * k + 1]) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sun_mlp_zero_and_identity() {
        let m = SunMlp::zeros(8, 64);
        assert!(m.embed(0.7).unwrap().iter().all(|&v| v == 0.0));
        let mut m = SunMlp::zeros(8, 64);
        for i in 0..16 {
            m.w1[i * 16 + i] = 1.0;
        }
        let ff = fourier_features(0.3, 8);
        let h = m.first_layer(&ff).unwrap();
        assert_eq!(&h[..16], &ff[..]);
        assert!(h[16..].iter().all(|&v| v == 0.0));
        assert!(matches!(m.forward(&ff[..10]), Err(ConditionError::Shape(_))));
    }

    #[test]
    fn rope_identity_at_origin_and_odd_dim() {
        let cfg = RopeConfig::for_dim(12).unwrap();
        let v: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
        assert_eq!(rope_apply(&v, [0, 0, 0], &cfg).unwrap(), v);
        assert_eq!(RopeConfig::for_dim(7), Err(ConditionError::OddDimension(7)));
        assert!(rope_apply(&v[..10], [1, 2, 3], &cfg).is_err());
    }

    #[test]
    fn pack_lengths_and_offsets() {
        let g = TokenGrid::new(1, 1, 1, 2, vec![1.0, 2.0]).unwrap();
        let seq = pack_temporal(&g, &g, &g, None).unwrap();
        let times: Vec<i64> = seq.iter().map(|t| t.position[0]).collect();
        assert_eq!(times, vec![0, 1, 2]);
        let g = TokenGrid::new(2, 3, 4, 2, vec![0.5; 48]).unwrap();
        assert_eq!(pack_temporal(&g, &g, &g, None).unwrap().len(), 3 * 24);
        assert_eq!(pack_channelwise(&g, &g, &g).unwrap().len(), 24);
        assert_eq!(pack_channelwise(&g, &g, &g).unwrap()[0].features.len(), 6);
        let other = TokenGrid::new(2, 3, 3, 2, vec![0.5; 36]).unwrap();
        assert!(pack_temporal(&g, &other, &g, None).is_err());
    }

    #[test]
    fn patchify_layout() {
        let frame: Vec<Rgb> = (0..16).map(|i| [i as f32, 0.0, 0.0]).collect();
        let g = TokenGrid::patchify(&[frame], 4, 4, 2).unwrap();
        assert_eq!((g.frames, g.height, g.width, g.dim), (1, 2, 2, 12));
        let red: Vec<f64> = g.token(0, 1, 0).iter().step_by(3).copied().collect();
        assert_eq!(red, vec![8.0, 9.0, 12.0, 13.0]);
    }
}
