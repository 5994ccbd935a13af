//! Procedural rooms and a deterministic direct-lighting renderer.
//!
//! Scenes are axis-aligned rooms (z up) holding diffuse spheres and boxes,
//! interior point lights and flush-mounted rectangular area lights, and one
//! window through which a directional sun and a constant sky are seen.
//! Rendering is Lambertian next-event estimation with shadow rays, plus an
//! optional single cosine-sampled indirect bounce. All randomness comes from
//! [`CounterRng`] streams keyed by `(seed, pixel, sample, purpose, light)`,
//! so per-light contributions do not depend on which other lights are on.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, EllipseParams, Ray};
use crate::hdr::HdrImage;
use crate::mask::Mask;
use crate::math::Vec3;
use crate::olat::{LightingSpec, OlatError};
use crate::rng::CounterRng;

/// Basis index of the exterior (sun and sky) light.
pub const EXTERIOR: usize = 0;

const EPS: f64 = 1e-6;
/// Area lights sit this far inside the room surface they are mounted on.
const LIGHT_INSET: f64 = 1e-3;

const TAG_PIXEL: u64 = 1;
const TAG_AREA: u64 = 2;
const TAG_BOUNCE: u64 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("light index {index} out of range 0..={max}")]
    InvalidLightIndex { index: usize, max: usize },
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Spec(#[from] OlatError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wall {
    XMin,
    XMax,
    YMin,
    YMax,
    Floor,
    Ceiling,
}

impl Wall {
    const ALL: [Wall; 6] = [Wall::XMin, Wall::XMax, Wall::YMin, Wall::YMax, Wall::Floor, Wall::Ceiling];

    fn index(self) -> usize {
        self as usize
    }

    /// Normal pointing into the room.
    pub fn inward_normal(self) -> Vec3 {
        match self {
            Wall::XMin => Vec3::new(1.0, 0.0, 0.0),
            Wall::XMax => Vec3::new(-1.0, 0.0, 0.0),
            Wall::YMin => Vec3::new(0.0, 1.0, 0.0),
            Wall::YMax => Vec3::new(0.0, -1.0, 0.0),
            Wall::Floor => Vec3::new(0.0, 0.0, 1.0),
            Wall::Ceiling => Vec3::new(0.0, 0.0, -1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub min: Vec3,
    pub max: Vec3,
    /// Albedo per wall in [`Wall`] order: x-min, x-max, y-min, y-max, floor, ceiling.
    pub albedo: [[f64; 3]; 6],
}

impl Room {
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - 1e-9 && p[k] <= self.max[k] + 1e-9)
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }

    /// Distance to and wall of the exit point of a ray starting inside.
    fn exit(&self, ray: &Ray) -> (f64, Wall) {
        let mut best = (f64::INFINITY, Wall::Floor);
        let walls = [(Wall::XMin, Wall::XMax), (Wall::YMin, Wall::YMax), (Wall::Floor, Wall::Ceiling)];
        for (k, (lo, hi)) in walls.into_iter().enumerate() {
            let d = ray.dir[k];
            if d > 0.0 {
                let t = (self.max[k] - ray.origin[k]) / d;
                if t < best.0 {
                    best = (t, hi);
                }
            } else if d < 0.0 {
                let t = (self.min[k] - ray.origin[k]) / d;
                if t < best.0 {
                    best = (t, lo);
                }
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { min: Vec3, max: Vec3 },
}

impl Shape {
    fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<(f64, Vec3)> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = ray.origin - center;
                let b = oc.dot(ray.dir);
                let c = oc.length_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                for t in [-b - sq, -b + sq] {
                    if t > t_min && t < t_max {
                        let n = (ray.at(t) - center) / radius;
                        return Some((t, n));
                    }
                }
                None
            }
            Shape::Box { min, max } => {
                let mut t0 = t_min;
                let mut t1 = t_max;
                let mut axis_in = usize::MAX;
                let mut axis_out = usize::MAX;
                for k in 0..3 {
                    let inv = 1.0 / ray.dir[k];
                    let mut ta = (min[k] - ray.origin[k]) * inv;
                    let mut tb = (max[k] - ray.origin[k]) * inv;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis_in = k;
                    }
                    if tb < t1 {
                        t1 = tb;
                        axis_out = k;
                    }
                    if t0 > t1 {
                        return None;
                    }
                }
                // entering hit, or exiting hit when the origin is inside
                let (t, axis) = if axis_in != usize::MAX && t0 > t_min {
                    (t0, axis_in)
                } else if axis_out != usize::MAX && t1 < t_max {
                    (t1, axis_out)
                } else {
                    return None;
                };
                let mut n = Vec3::ZERO;
                let s = if ray.dir[axis] > 0.0 { -1.0 } else { 1.0 };
                match axis {
                    0 => n.x = s,
                    1 => n.y = s,
                    _ => n.z = s,
                }
                Some((t, n))
            }
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match *self {
            Shape::Sphere { center, radius } => (center - Vec3::splat(radius), center + Vec3::splat(radius)),
            Shape::Box { min, max } => (min, max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(flatten)]
    pub shape: Shape,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LightKind {
    /// Isotropic point source; `intensity` is radiant intensity.
    Point { position: Vec3 },
    /// One-sided rectangle `center + s*half_u + t*half_v`, `s, t` in `[-1, 1]`,
    /// emitting along `half_u x half_v`; `intensity` is its radiance.
    Rect {
        center: Vec3,
        half_u: Vec3,
        half_v: Vec3,
        /// Diffuse albedo of the panel when lit by other sources.
        albedo: [f64; 3],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightDesc {
    pub id: u32,
    #[serde(flatten)]
    pub kind: LightKind,
    /// Emission at `c = (1, 1, 1)`.
    pub intensity: f64,
}

impl LightDesc {
    pub fn position(&self) -> Vec3 {
        match self.kind {
            LightKind::Point { position } => position,
            LightKind::Rect { center, .. } => center,
        }
    }
}

struct RectGeom {
    center: Vec3,
    half_u: Vec3,
    half_v: Vec3,
    normal: Vec3,
    area: f64,
}

impl RectGeom {
    fn new(center: Vec3, half_u: Vec3, half_v: Vec3) -> Self {
        let c = half_u.cross(half_v);
        Self {
            center,
            half_u,
            half_v,
            normal: c.normalized(),
            area: 4.0 * c.length(),
        }
    }

    /// Two-sided plane hit; returns `(t, front)` where front means the ray
    /// arrives against the emitting normal.
    fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<(f64, bool)> {
        let denom = ray.dir.dot(self.normal);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.center - ray.origin).dot(self.normal) / denom;
        if t <= t_min || t >= t_max {
            return None;
        }
        let rel = ray.at(t) - self.center;
        let s = rel.dot(self.half_u) / self.half_u.length_squared();
        let u = rel.dot(self.half_v) / self.half_v.length_squared();
        if s.abs() <= 1.0 && u.abs() <= 1.0 {
            Some((t, denom < 0.0))
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub wall: Wall,
    /// Horizontal extent along the wall (x for y-walls, y for x-walls).
    pub u: [f64; 2],
    /// Vertical extent (z).
    pub v: [f64; 2],
}

impl Window {
    fn contains(&self, p: Vec3) -> bool {
        let u = match self.wall {
            Wall::XMin | Wall::XMax => p.y,
            _ => p.x,
        };
        u >= self.u[0] && u <= self.u[1] && p.z >= self.v[0] && p.z <= self.v[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sun {
    /// Unit propagation direction of sunlight (pointing into the room).
    pub direction: Vec3,
    /// Irradiance on a surface facing the sun, at unit intensity.
    pub irradiance: f64,
    /// Radiance of the sky seen through the window.
    pub sky: [f64; 3],
}

/// A procedural room. Light ids run `1..=L`; basis index 0 is the exterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDesc {
    pub seed: u64,
    pub room: Room,
    pub objects: Vec<SceneObject>,
    pub lights: Vec<LightDesc>,
    pub window: Window,
    pub sun: Sun,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    pub spp: u32,
    pub seed: u64,
    /// Add one cosine-sampled indirect bounce.
    pub indirect: bool,
    /// Stratified samples per axis on rectangular lights.
    pub area_samples: u32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            spp: 1,
            seed: 0,
            indirect: false,
            area_samples: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Diffuse([f64; 3]),
    /// Front face of light `index` (position in `SceneDesc::lights`).
    Emitter { index: usize, albedo: [f64; 3] },
    Sky,
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    point: Vec3,
    normal: Vec3,
    surface: Surface,
}

/// Ray-hit distance per pixel; `+inf` for sky, misses and pixels outside
/// the image circle.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
}

impl DepthMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }
}

fn mul3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] * b[0], a[1] * b[1], a[2] * b[2]]
}

fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add3(a: &mut [f64; 3], b: [f64; 3]) {
    for k in 0..3 {
        a[k] += b[k];
    }
}

fn orthonormal_basis(n: Vec3) -> (Vec3, Vec3) {
    let a = if n.x.abs() > 0.9 { Vec3::new(0.0, 1.0, 0.0) } else { Vec3::new(1.0, 0.0, 0.0) };
    let t = n.cross(a).normalized();
    (t, n.cross(t))
}

impl SceneDesc {
    pub fn num_lights(&self) -> usize {
        self.lights.len()
    }

    /// Default capture path: an ellipse around the room center at 1.3 m,
    /// inside the object-free zone.
    pub fn default_rig_params(&self, n: usize) -> EllipseParams {
        let c = self.room.center();
        let s = self.room.size();
        EllipseParams::new(Vec3::new(c.x, c.y, self.room.min.z), 0.18 * s.x, 0.18 * s.y, 1.3, n)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Invalid(m));
        let room = &self.room;
        if (0..3).any(|k| room.max[k] - room.min[k] <= 0.0) {
            return bad("room box is degenerate".into());
        }
        for (i, l) in self.lights.iter().enumerate() {
            if l.id as usize != i + 1 {
                return bad(format!("light ids must be 1..=L in order, found {} at position {i}", l.id));
            }
            if !(l.intensity.is_finite() && l.intensity >= 0.0) {
                return bad(format!("light {} has invalid intensity", l.id));
            }
            match &l.kind {
                LightKind::Point { position } => {
                    if !room.contains(*position) {
                        return bad(format!("light {} lies outside the room", l.id));
                    }
                }
                LightKind::Rect { center, half_u, half_v, .. } => {
                    for (s, t) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                        if !room.contains(*center + *half_u * s + *half_v * t) {
                            return bad(format!("light {} extends outside the room", l.id));
                        }
                    }
                    if half_u.cross(*half_v).length() == 0.0 {
                        return bad(format!("light {} has zero area", l.id));
                    }
                }
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            let (lo, hi) = o.shape.bounds();
            if !room.contains(lo) || !room.contains(hi) {
                return bad(format!("object {i} extends outside the room"));
            }
        }
        if matches!(self.window.wall, Wall::Floor | Wall::Ceiling) {
            return bad("window must be on a vertical wall".into());
        }
        if self.window.u[0] >= self.window.u[1] || self.window.v[0] >= self.window.v[1] {
            return bad("window rectangle is empty".into());
        }
        let d = self.sun.direction;
        if !((d.length() - 1.0).abs() < 1e-9) {
            return bad("sun direction must be unit length".into());
        }
        if d.dot(self.window.wall.inward_normal()) <= 0.0 {
            return bad("sun must shine into the room through the window".into());
        }
        Ok(())
    }

    fn rect(&self, index: usize) -> Option<RectGeom> {
        match self.lights[index].kind {
            LightKind::Rect { center, half_u, half_v, .. } => Some(RectGeom::new(center, half_u, half_v)),
            LightKind::Point { .. } => None,
        }
    }

    fn trace(&self, ray: &Ray) -> Hit {
        let (mut t_best, wall) = self.room.exit(ray);
        let mut hit_surface = None;
        for o in &self.objects {
            if let Some((t, n)) = o.shape.intersect(ray, EPS, t_best) {
                t_best = t;
                hit_surface = Some((n, Surface::Diffuse(o.albedo)));
            }
        }
        for (index, l) in self.lights.iter().enumerate() {
            if let LightKind::Rect { center, half_u, half_v, albedo } = l.kind {
                let g = RectGeom::new(center, half_u, half_v);
                if let Some((t, front)) = g.intersect(ray, EPS, t_best) {
                    t_best = t;
                    let n = if front { g.normal } else { -g.normal };
                    let surface = if front {
                        Surface::Emitter { index, albedo }
                    } else {
                        Surface::Diffuse(albedo)
                    };
                    hit_surface = Some((n, surface));
                }
            }
        }
        let point = ray.at(t_best);
        match hit_surface {
            Some((normal, surface)) => Hit {
                t: t_best,
                point,
                normal,
                surface,
            },
            None => {
                if wall == self.window.wall && self.window.contains(point) {
                    Hit {
                        t: f64::INFINITY,
                        point,
                        normal: wall.inward_normal(),
                        surface: Surface::Sky,
                    }
                } else {
                    Hit {
                        t: t_best,
                        point,
                        normal: wall.inward_normal(),
                        surface: Surface::Diffuse(self.room.albedo[wall.index()]),
                    }
                }
            }
        }
    }

    /// Whether an object blocks the open segment `from -> to`.
    fn occluded(&self, from: Vec3, to: Vec3) -> bool {
        let delta = to - from;
        let dist = delta.length();
        let ray = Ray {
            origin: from,
            dir: delta / dist,
        };
        self.objects
            .iter()
            .any(|o| o.shape.intersect(&ray, EPS, dist - EPS).is_some())
    }

    /// Reflected radiance at a diffuse point from one source (direct only).
    fn direct(&self, p: Vec3, n: Vec3, albedo: [f64; 3], source: usize, rng: &mut CounterRng, area_n: u32) -> [f64; 3] {
        let origin = p + n * EPS;
        if source == EXTERIOR {
            let to_sun = -self.sun.direction;
            let cos = n.dot(to_sun);
            if cos <= 0.0 {
                return [0.0; 3];
            }
            let ray = Ray { origin, dir: to_sun };
            let (t_exit, wall) = self.room.exit(&ray);
            if wall != self.window.wall || !self.window.contains(ray.at(t_exit)) {
                return [0.0; 3];
            }
            if self.occluded(origin, ray.at(t_exit)) {
                return [0.0; 3];
            }
            return scale3(albedo, self.sun.irradiance * cos / PI);
        }
        let light = &self.lights[source - 1];
        match light.kind {
            LightKind::Point { position } => {
                let to = position - origin;
                let d2 = to.length_squared();
                let cos = n.dot(to) / d2.sqrt();
                if cos <= 0.0 || self.occluded(origin, position) {
                    return [0.0; 3];
                }
                scale3(albedo, light.intensity * cos / (PI * d2))
            }
            LightKind::Rect { .. } => {
                let g = self.rect(source - 1).expect("rect light");
                let m = area_n.max(1);
                let mut sum = 0.0;
                for i in 0..m {
                    for j in 0..m {
                        let s = (i as f64 + rng.uniform()) / m as f64 * 2.0 - 1.0;
                        let t = (j as f64 + rng.uniform()) / m as f64 * 2.0 - 1.0;
                        let y = g.center + g.half_u * s + g.half_v * t;
                        let to = y - origin;
                        let d2 = to.length_squared();
                        let d = d2.sqrt();
                        let cos_x = n.dot(to) / d;
                        let cos_l = -g.normal.dot(to) / d;
                        if cos_x <= 0.0 || cos_l <= 0.0 || self.occluded(origin, y) {
                            continue;
                        }
                        sum += cos_x * cos_l / d2;
                    }
                }
                let e = light.intensity * sum * g.area / (m * m) as f64;
                scale3(albedo, e / PI)
            }
        }
    }

    /// Per-source radiance along one camera ray. `active[l]` gates source `l`.
    fn ray_terms(&self, ray: &Ray, active: &[bool], key: [u64; 3], opts: &RenderOptions, out: &mut [[f64; 3]]) {
        for o in out.iter_mut() {
            *o = [0.0; 3];
        }
        let hit = self.trace(ray);
        let albedo = match hit.surface {
            Surface::Sky => {
                if active[EXTERIOR] {
                    out[EXTERIOR] = self.sun.sky;
                }
                return;
            }
            Surface::Emitter { index, albedo } => {
                if active[index + 1] {
                    out[index + 1] = [self.lights[index].intensity; 3];
                }
                albedo
            }
            Surface::Diffuse(albedo) => albedo,
        };
        let [seed, pixel, sample] = key;
        for (source, slot) in out.iter_mut().enumerate() {
            if !active[source] {
                continue;
            }
            let mut rng = CounterRng::new(&[seed, pixel, sample, TAG_AREA, source as u64, 0]);
            add3(slot, self.direct(hit.point, hit.normal, albedo, source, &mut rng, opts.area_samples));
        }
        if !opts.indirect {
            return;
        }
        let mut rng = CounterRng::new(&[seed, pixel, sample, TAG_BOUNCE]);
        let (t1, t2) = orthonormal_basis(hit.normal);
        let r = rng.uniform().sqrt();
        let phi = 2.0 * PI * rng.uniform();
        let local = (t1 * (r * phi.cos()) + t2 * (r * phi.sin()) + hit.normal * (1.0 - r * r).max(0.0).sqrt()).normalized();
        let bounce = Ray {
            origin: hit.point + hit.normal * EPS,
            dir: local,
        };
        let second = self.trace(&bounce);
        match second.surface {
            Surface::Sky => {
                if active[EXTERIOR] {
                    add3(&mut out[EXTERIOR], mul3(albedo, self.sun.sky));
                }
            }
            Surface::Diffuse(a2) | Surface::Emitter { albedo: a2, .. } => {
                // cosine sampling cancels the cos/pi of the first vertex
                for (source, slot) in out.iter_mut().enumerate() {
                    if !active[source] {
                        continue;
                    }
                    let mut rng = CounterRng::new(&[seed, pixel, sample, TAG_AREA, source as u64, 1]);
                    let l = self.direct(second.point, second.normal, a2, source, &mut rng, opts.area_samples);
                    add3(slot, mul3(albedo, l));
                }
            }
        }
    }

    fn sample_position(x: usize, y: usize, s: u32, spp: u32, key: u64) -> [f64; 2] {
        if spp <= 1 {
            return [x as f64 + 0.5, y as f64 + 0.5];
        }
        let mut rng = CounterRng::new(&[key, TAG_PIXEL, s as u64]);
        [x as f64 + rng.uniform(), y as f64 + rng.uniform()]
    }

    /// Calls `f` with per-source radiance for every valid sample of pixel `(x, y)`.
    fn for_each_sample(
        &self,
        camera: &Camera,
        x: usize,
        y: usize,
        active: &[bool],
        opts: &RenderOptions,
        mut f: impl FnMut(&[[f64; 3]]),
    ) {
        let w = camera.width();
        let pixel = (y * w + x) as u64;
        let key = crate::rng::hash_key(&[opts.seed, pixel]);
        let mut terms = vec![[0.0f64; 3]; active.len()];
        for s in 0..opts.spp.max(1) {
            let pos = Self::sample_position(x, y, s, opts.spp, key);
            let Ok(ray) = camera.ray(pos) else { continue };
            self.ray_terms(&ray, active, [opts.seed, pixel, s as u64], opts, &mut terms);
            f(&terms);
        }
    }

    fn check_index(&self, light: usize) -> Result<(), SceneError> {
        if light > self.lights.len() {
            return Err(SceneError::InvalidLightIndex {
                index: light,
                max: self.lights.len(),
            });
        }
        Ok(())
    }

    /// Renders several weighted source combinations in one pass.
    ///
    /// Each output image is `sum_l w[l] * L_l` averaged over pixel samples,
    /// together with the standard error of that mean per component.
    pub fn render_weighted(
        &self,
        camera: &Camera,
        weights: &[Vec<[f64; 3]>],
        opts: &RenderOptions,
    ) -> Vec<(HdrImage, HdrImage)> {
        let n_src = self.lights.len() + 1;
        let mut active = vec![false; n_src];
        for w in weights {
            assert_eq!(w.len(), n_src, "weight vector length must be L + 1");
            for (a, c) in active.iter_mut().zip(w) {
                *a |= c.iter().any(|&v| v != 0.0);
            }
        }
        let (w, h) = (camera.width(), camera.height());
        let rows: Vec<Vec<Vec<([f64; 3], [f64; 3])>>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let mut sum = vec![[0.0f64; 3]; weights.len()];
                        let mut sum2 = vec![[0.0f64; 3]; weights.len()];
                        let mut n = 0usize;
                        self.for_each_sample(camera, x, y, &active, opts, |terms| {
                            n += 1;
                            for (k, wk) in weights.iter().enumerate() {
                                let mut v = [0.0f64; 3];
                                for (c, t) in wk.iter().zip(terms) {
                                    add3(&mut v, mul3(*c, *t));
                                }
                                add3(&mut sum[k], v);
                                add3(&mut sum2[k], mul3(v, v));
                            }
                        });
                        (0..weights.len())
                            .map(|k| {
                                if n == 0 {
                                    return ([0.0; 3], [0.0; 3]);
                                }
                                let nf = n as f64;
                                let mean = scale3(sum[k], 1.0 / nf);
                                let mut se = [0.0; 3];
                                if n > 1 {
                                    for c in 0..3 {
                                        let var = (sum2[k][c] / nf - mean[c] * mean[c]).max(0.0) * nf / (nf - 1.0);
                                        se[c] = (var / nf).sqrt();
                                    }
                                }
                                (mean, se)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        (0..weights.len())
            .map(|k| {
                let mut mean = HdrImage::zeros(w, h);
                let mut se = HdrImage::zeros(w, h);
                for (y, row) in rows.iter().enumerate() {
                    for (x, px) in row.iter().enumerate() {
                        mean.set(x, y, px[k].0.map(|v| v as f32));
                        se.set(x, y, px[k].1.map(|v| v as f32));
                    }
                }
                (mean, se)
            })
            .collect()
    }

    fn unit_weights(&self, light: usize) -> Vec<[f64; 3]> {
        let mut w = vec![[0.0; 3]; self.lights.len() + 1];
        w[light] = [1.0; 3];
        w
    }

    /// One-light-at-a-time render: only source `light` on at unit emission.
    pub fn render_olat(&self, camera: &Camera, light: usize, opts: &RenderOptions) -> Result<HdrImage, SceneError> {
        self.check_index(light)?;
        Ok(self.render_weighted(camera, &[self.unit_weights(light)], opts).remove(0).0)
    }

    /// The full OLAT basis (`L + 1` images) for one view in a single pass.
    pub fn render_basis(&self, camera: &Camera, opts: &RenderOptions) -> Vec<HdrImage> {
        let weights: Vec<_> = (0..=self.lights.len()).map(|l| self.unit_weights(l)).collect();
        self.render_weighted(camera, &weights, opts).into_iter().map(|(m, _)| m).collect()
    }

    /// Weights `e * c_l` per source for a lighting spec.
    pub fn spec_weights(&self, spec: &LightingSpec) -> Result<Vec<[f64; 3]>, SceneError> {
        spec.validate()?;
        spec.check_ids(self.lights.len())?;
        let e = spec.exposure as f64;
        Ok(spec
            .weights(self.lights.len())
            .into_iter()
            .map(|c| c.map(|v| v as f64 * e))
            .collect())
    }

    /// Renders with every source scaled by its spec color (sun by its scalar)
    /// and the exposure applied, all lights at once.
    pub fn render_combined(&self, camera: &Camera, spec: &LightingSpec, opts: &RenderOptions) -> Result<HdrImage, SceneError> {
        Ok(self.render_combined_with_error(camera, spec, opts)?.0)
    }

    /// [`SceneDesc::render_combined`] plus the per-pixel standard error.
    pub fn render_combined_with_error(
        &self,
        camera: &Camera,
        spec: &LightingSpec,
        opts: &RenderOptions,
    ) -> Result<(HdrImage, HdrImage), SceneError> {
        let w = self.spec_weights(spec)?;
        Ok(self.render_weighted(camera, &[w], opts).remove(0))
    }

    pub fn render_depth(&self, camera: &Camera) -> DepthMap {
        let (w, h) = (camera.width(), camera.height());
        let mut depth = vec![f64::INFINITY; w * h];
        for y in 0..h {
            for x in 0..w {
                if let Ok(ray) = camera.ray([x as f64 + 0.5, y as f64 + 0.5]) {
                    depth[y * w + x] = self.trace(&ray).t;
                }
            }
        }
        DepthMap { width: w, height: h, depth }
    }

    /// Light id seen at each pixel center: rectangle lights by primary hit,
    /// point lights as discs of `splat_radius` pixels around their projection
    /// when unoccluded. Nearer lights win where splats overlap.
    pub fn render_light_ids(&self, camera: &Camera, splat_radius: f64) -> Vec<Option<u32>> {
        let (w, h) = (camera.width(), camera.height());
        let mut ids: Vec<Option<(u32, f64)>> = vec![None; w * h];
        for y in 0..h {
            for x in 0..w {
                if let Ok(ray) = camera.ray([x as f64 + 0.5, y as f64 + 0.5]) {
                    let hit = self.trace(&ray);
                    if let Surface::Emitter { index, .. } = hit.surface {
                        ids[y * w + x] = Some((self.lights[index].id, hit.t));
                    }
                }
            }
        }
        let mut points: Vec<(f64, u32, Vec3)> = self
            .lights
            .iter()
            .filter_map(|l| match l.kind {
                LightKind::Point { position } => Some(((position - camera.pose.position).length(), l.id, position)),
                _ => None,
            })
            .collect();
        points.sort_by(|a, b| b.0.total_cmp(&a.0));
        for (dist, id, position) in points {
            let Ok(center) = camera.project(position) else { continue };
            if self.occluded(camera.pose.position, position) {
                continue;
            }
            let r = splat_radius.max(0.0);
            let x0 = (center[0] - r - 0.5).floor().max(0.0) as usize;
            let y0 = (center[1] - r - 0.5).floor().max(0.0) as usize;
            let x1 = ((center[0] + r).ceil() as usize).min(w.saturating_sub(1));
            let y1 = ((center[1] + r).ceil() as usize).min(h.saturating_sub(1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let pc = [x as f64 + 0.5, y as f64 + 0.5];
                    if (pc[0] - center[0]).hypot(pc[1] - center[1]) > r || !camera.intrinsics.contains_pixel(pc) {
                        continue;
                    }
                    let slot = &mut ids[y * w + x];
                    match slot {
                        Some((_, t)) if *t < dist => {}
                        _ => *slot = Some((id, dist)),
                    }
                }
            }
        }
        ids.into_iter().map(|v| v.map(|(id, _)| id)).collect()
    }

    /// Pixels whose view of light `light` (1-based id) is unobstructed.
    pub fn render_light_visibility(&self, camera: &Camera, light: usize, splat_radius: f64) -> Result<Mask, SceneError> {
        if light == 0 || light > self.lights.len() {
            return Err(SceneError::InvalidLightIndex {
                index: light,
                max: self.lights.len(),
            });
        }
        let ids = self.render_light_ids(camera, splat_radius);
        let bits = ids.iter().map(|&id| id == Some(light as u32)).collect();
        Ok(Mask::from_bits(camera.width(), camera.height(), bits))
    }
}

/// Default splat radius, in pixels, for point-light visibility masks.
pub const DEFAULT_SPLAT_RADIUS: f64 = 2.0;

fn pastel<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    let base = rng.gen_range(lo..hi);
    let tint = 0.12;
    [0, 1, 2].map(|_| (base + rng.gen_range(-tint..tint)).clamp(0.05, 0.95))
}

/// Procedural room for `seed`: 2-4 interior lights, 1-5 objects, one window.
///
/// Objects and lamps are kept out of a central zone spanning 56% of each
/// horizontal room dimension, so the default capture rig never sits inside
/// geometry.
pub fn generate_scene(seed: u64) -> SceneDesc {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = Vec3::new(rng.gen_range(4.0..5.5), rng.gen_range(3.5..4.5), rng.gen_range(2.6..3.0));
    let room_min = Vec3::ZERO;
    let room_max = size;
    let mut albedo = [[0.0; 3]; 6];
    for wall in Wall::ALL {
        albedo[wall.index()] = match wall {
            Wall::Floor => pastel(&mut rng, 0.25, 0.55),
            Wall::Ceiling => pastel(&mut rng, 0.7, 0.9),
            _ => pastel(&mut rng, 0.45, 0.85),
        };
    }
    let room = Room {
        min: room_min,
        max: room_max,
        albedo,
    };
    let center = room.center();
    let clear = Vec3::new(0.28 * size.x, 0.28 * size.y, 0.0);
    let in_clear_zone = |lo: Vec3, hi: Vec3| {
        hi.x > center.x - clear.x && lo.x < center.x + clear.x && hi.y > center.y - clear.y && lo.y < center.y + clear.y
    };

    let n_objects = rng.gen_range(1..=5);
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut attempts = 0;
    while objects.len() < n_objects && attempts < 2000 {
        attempts += 1;
        let albedo = [0, 1, 2].map(|_| rng.gen_range(0.15..0.9));
        let shape = if rng.gen_bool(0.5) {
            let radius = rng.gen_range(0.2..0.4);
            let c = Vec3::new(
                rng.gen_range(radius + 0.05..size.x - radius - 0.05),
                rng.gen_range(radius + 0.05..size.y - radius - 0.05),
                radius,
            );
            Shape::Sphere { center: c, radius }
        } else {
            let half = Vec3::new(rng.gen_range(0.15..0.4), rng.gen_range(0.15..0.4), rng.gen_range(0.2..0.45));
            let c = Vec3::new(
                rng.gen_range(half.x + 0.05..size.x - half.x - 0.05),
                rng.gen_range(half.y + 0.05..size.y - half.y - 0.05),
                half.z,
            );
            Shape::Box {
                min: c - half,
                max: c + half,
            }
        };
        let (lo, hi) = shape.bounds();
        if in_clear_zone(lo, hi) {
            continue;
        }
        let overlaps = objects.iter().any(|o| {
            let (a, b) = o.shape.bounds();
            (0..2).all(|k| lo[k] < b[k] + 0.1 && hi[k] > a[k] - 0.1)
        });
        if !overlaps {
            objects.push(SceneObject { shape, albedo });
        }
    }

    let n_lights = rng.gen_range(2..=4);
    let mut lights: Vec<LightDesc> = Vec::new();
    let mut attempts = 0;
    while lights.len() < n_lights && attempts < 2000 {
        attempts += 1;
        let id = lights.len() as u32 + 1;
        if rng.gen_bool(0.5) {
            let hu = rng.gen_range(0.2..0.45);
            let hv = rng.gen_range(0.2..0.45);
            let c = Vec3::new(
                rng.gen_range(hu + 0.2..size.x - hu - 0.2),
                rng.gen_range(hv + 0.2..size.y - hv - 0.2),
                size.z - LIGHT_INSET,
            );
            let clash = lights.iter().any(|l| match l.kind {
                LightKind::Rect { center, half_u, half_v, .. } => {
                    (c.x - center.x).abs() < hu + half_u.length() + 0.2 && (c.y - center.y).abs() < hv + half_v.length() + 0.2
                }
                _ => false,
            });
            if clash {
                continue;
            }
            // half_u x half_v = -z: emits downward
            lights.push(LightDesc {
                id,
                kind: LightKind::Rect {
                    center: c,
                    half_u: Vec3::new(0.0, hv, 0.0),
                    half_v: Vec3::new(hu, 0.0, 0.0),
                    albedo: [0.85; 3],
                },
                intensity: 4.0,
            });
        } else {
            let p = Vec3::new(
                rng.gen_range(0.3..size.x - 0.3),
                rng.gen_range(0.3..size.y - 0.3),
                rng.gen_range(0.8..2.0),
            );
            if in_clear_zone(p - Vec3::splat(0.1), p + Vec3::splat(0.1)) {
                continue;
            }
            if objects.iter().any(|o| {
                let (a, b) = o.shape.bounds();
                (0..3).all(|k| p[k] > a[k] - 0.15 && p[k] < b[k] + 0.15)
            }) {
                continue;
            }
            lights.push(LightDesc {
                id,
                kind: LightKind::Point { position: p },
                intensity: 1.0,
            });
        }
    }

    let wall = [Wall::XMin, Wall::XMax, Wall::YMin, Wall::YMax][rng.gen_range(0..4)];
    let span = match wall {
        Wall::XMin | Wall::XMax => size.y,
        _ => size.x,
    };
    let width = rng.gen_range(0.8..1.5);
    let u0 = rng.gen_range(0.3..span - width - 0.3);
    let bottom = rng.gen_range(0.8..1.0);
    let height = rng.gen_range(0.8..1.2);
    let window = Window {
        wall,
        u: [u0, u0 + width],
        v: [bottom, bottom + height],
    };
    let inward = wall.inward_normal();
    let tangent = Vec3::UP.cross(inward);
    let elevation = rng.gen_range(25f64..50.0).to_radians();
    let azimuth = rng.gen_range(-35f64..35.0).to_radians();
    let horizontal = inward * azimuth.cos() + tangent * azimuth.sin();
    let direction = (horizontal * elevation.cos() + Vec3::new(0.0, 0.0, -elevation.sin())).normalized();
    let sun = Sun {
        direction,
        irradiance: 1.0,
        sky: [0.35, 0.45, 0.6],
    };

    let scene = SceneDesc {
        seed,
        room,
        objects,
        lights,
        window,
        sun,
    };
    debug_assert!(scene.validate().is_ok());
    scene
}
