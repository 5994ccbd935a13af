//! Equisolid fisheye cameras and elliptical capture rigs.
//!
//! Camera frame: +z is the optical axis, +x points right and +y points down
//! in the image. Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`, so its center is
//! at `(i + 0.5, j + 0.5)` and the principal point sits at `(w/2, h/2)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Mat3, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("direction is {angle_deg:.4} deg off axis, beyond half field of view {limit_deg:.4} deg")]
    OutsideFov { angle_deg: f64, limit_deg: f64 },
    #[error("pixel ({x:.3}, {y:.3}) lies outside the image circle of radius {radius:.3}")]
    OutsideImageCircle { x: f64, y: f64, radius: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("degenerate rig: {0}")]
    DegenerateRig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LensModel {
    #[default]
    Equisolid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisheyeIntrinsics {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Full field of view in degrees.
    pub fov_deg: f64,
    #[serde(default)]
    pub model: LensModel,
}

impl FisheyeIntrinsics {
    pub fn new(width: usize, height: usize, focal: f64, fov_deg: f64) -> Result<Self, CameraError> {
        let k = Self {
            width,
            height,
            focal,
            fov_deg,
            model: LensModel::Equisolid,
        };
        k.validate()?;
        Ok(k)
    }

    /// Largest focal length whose image circle fits inside the frame.
    pub fn full_circle(width: usize, height: usize, fov_deg: f64) -> Result<Self, CameraError> {
        let half = width.min(height) as f64 / 2.0;
        let focal = half / (2.0 * (fov_deg.to_radians() / 4.0).sin());
        Self::new(width, height, focal, fov_deg)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::InvalidIntrinsics("zero image size".into()));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(format!("focal {} must be > 0", self.focal)));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg <= 180.0) {
            return Err(CameraError::InvalidIntrinsics(format!("fov {} outside (0, 180]", self.fov_deg)));
        }
        let limit = self.width.min(self.height) as f64 / 2.0;
        if self.circle_radius() > limit * (1.0 + 1e-12) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "image circle radius {} exceeds {}",
                self.circle_radius(),
                limit
            )));
        }
        Ok(())
    }

    pub fn principal_point(&self) -> [f64; 2] {
        [self.width as f64 / 2.0, self.height as f64 / 2.0]
    }

    pub fn half_fov(&self) -> f64 {
        self.fov_deg.to_radians() / 2.0
    }

    /// Image-circle radius `2f sin(fov/4)`.
    pub fn circle_radius(&self) -> f64 {
        2.0 * self.focal * (self.fov_deg.to_radians() / 4.0).sin()
    }

    /// Equisolid radial law `r = 2f sin(theta/2)`.
    pub fn radius_for_angle(&self, theta: f64) -> f64 {
        2.0 * self.focal * (theta / 2.0).sin()
    }

    pub fn project(&self, dir: Vec3) -> Result<[f64; 2], CameraError> {
        let planar = dir.x.hypot(dir.y);
        let theta = planar.atan2(dir.z);
        let limit = self.half_fov();
        if theta > limit + 1e-12 {
            return Err(CameraError::OutsideFov {
                angle_deg: theta.to_degrees(),
                limit_deg: limit.to_degrees(),
            });
        }
        let [cx, cy] = self.principal_point();
        if planar == 0.0 {
            return Ok([cx, cy]);
        }
        let r = self.radius_for_angle(theta);
        Ok([cx + r * dir.x / planar, cy + r * dir.y / planar])
    }

    pub fn unproject(&self, pixel: [f64; 2]) -> Result<Vec3, CameraError> {
        let [cx, cy] = self.principal_point();
        let dx = pixel[0] - cx;
        let dy = pixel[1] - cy;
        let r = dx.hypot(dy);
        let radius = self.circle_radius();
        if r > radius * (1.0 + 1e-12) {
            return Err(CameraError::OutsideImageCircle {
                x: pixel[0],
                y: pixel[1],
                radius,
            });
        }
        if r == 0.0 {
            return Ok(Vec3::new(0.0, 0.0, 1.0));
        }
        let theta = 2.0 * (r / (2.0 * self.focal)).min(1.0).asin();
        let s = theta.sin();
        Ok(Vec3::new(s * dx / r, s * dy / r, theta.cos()))
    }

    pub fn contains_pixel(&self, pixel: [f64; 2]) -> bool {
        let [cx, cy] = self.principal_point();
        (pixel[0] - cx).hypot(pixel[1] - cy) <= self.circle_radius()
    }

    /// Whether the center of integer pixel `(x, y)` lies in the image circle.
    pub fn pixel_center_inside(&self, x: usize, y: usize) -> bool {
        self.contains_pixel([x as f64 + 0.5, y as f64 + 0.5])
    }
}

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Vec3,
    pub rotation: Mat3,
}

impl CameraPose {
    pub fn new(position: Vec3, rotation: Mat3) -> Result<Self, CameraError> {
        let pose = Self { position, rotation };
        pose.validate()?;
        Ok(pose)
    }

    /// Pose looking along `forward` with image-up as close to `up` as possible.
    pub fn looking(position: Vec3, forward: Vec3, up: Vec3) -> Result<Self, CameraError> {
        let f = forward.normalized();
        let mut right = f.cross(up);
        if right.length() < 1e-9 {
            // forward is parallel to up; any perpendicular works
            right = f.cross(Vec3::new(1.0, 0.0, 0.0));
            if right.length() < 1e-9 {
                right = f.cross(Vec3::new(0.0, 1.0, 0.0));
            }
        }
        let right = right.normalized();
        let down = f.cross(right);
        Self::new(position, Mat3::from_columns(right, down, f))
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !self.position.is_finite() {
            return Err(CameraError::InvalidPose("non-finite position".into()));
        }
        let err = self.rotation.orthonormality_error();
        if !(err <= 1e-9) {
            return Err(CameraError::InvalidPose(format!("rotation not orthonormal (err {err:e})")));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(CameraError::InvalidPose("rotation has det -1".into()));
        }
        Ok(())
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2)
    }

    pub fn to_camera(&self, world: Vec3) -> Vec3 {
        self.rotation.transpose().mul_vec(world - self.position)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

pub fn pixel_ray(intrinsics: &FisheyeIntrinsics, pose: &CameraPose, pixel: [f64; 2]) -> Result<Ray, CameraError> {
    let d = intrinsics.unproject(pixel)?;
    Ok(Ray {
        origin: pose.position,
        dir: pose.rotation.mul_vec(d).normalized(),
    })
}

/// Projects a world point into the image; errors if it is outside the FOV.
pub fn world_to_pixel(intrinsics: &FisheyeIntrinsics, pose: &CameraPose, point: Vec3) -> Result<[f64; 2], CameraError> {
    intrinsics.project(pose.to_camera(point))
}

/// Intrinsics plus pose: everything needed to generate rays for one view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: FisheyeIntrinsics,
    pub pose: CameraPose,
}

impl Camera {
    pub fn ray(&self, pixel: [f64; 2]) -> Result<Ray, CameraError> {
        pixel_ray(&self.intrinsics, &self.pose, pixel)
    }

    pub fn project(&self, point: Vec3) -> Result<[f64; 2], CameraError> {
        world_to_pixel(&self.intrinsics, &self.pose, point)
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LookDirection {
    #[default]
    Outward,
    Inward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// Equal steps of the ellipse parameter angle.
    #[default]
    ParameterAngle,
    /// Equal steps of arc length.
    ArcLength,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub center: Vec3,
    pub semi_axis_a: f64,
    pub semi_axis_b: f64,
    pub height: f64,
    pub n: usize,
    #[serde(default)]
    pub look: LookDirection,
    #[serde(default)]
    pub spacing: Spacing,
}

impl EllipseParams {
    pub fn new(center: Vec3, semi_axis_a: f64, semi_axis_b: f64, height: f64, n: usize) -> Self {
        Self {
            center,
            semi_axis_a,
            semi_axis_b,
            height,
            n,
            look: LookDirection::Outward,
            spacing: Spacing::ParameterAngle,
        }
    }

    pub fn parameter_angles(&self) -> Vec<f64> {
        let n = self.n;
        match self.spacing {
            Spacing::ParameterAngle => (0..n).map(|k| std::f64::consts::TAU * k as f64 / n as f64).collect(),
            Spacing::ArcLength => arc_length_angles(self.semi_axis_a, self.semi_axis_b, n),
        }
    }

    pub fn point(&self, phi: f64) -> Vec3 {
        self.center + Vec3::new(self.semi_axis_a * phi.cos(), self.semi_axis_b * phi.sin(), self.height)
    }
}

fn arc_length_angles(a: f64, b: f64, n: usize) -> Vec<f64> {
    const STEPS: usize = 20_000;
    let speed = |phi: f64| (a * phi.sin()).hypot(b * phi.cos());
    let h = std::f64::consts::TAU / STEPS as f64;
    let mut cum = Vec::with_capacity(STEPS + 1);
    cum.push(0.0);
    for i in 0..STEPS {
        let p0 = i as f64 * h;
        let s = (speed(p0) + 4.0 * speed(p0 + h / 2.0) + speed(p0 + h)) * h / 6.0;
        cum.push(cum[i] + s);
    }
    let total = cum[STEPS];
    (0..n)
        .map(|k| {
            let target = total * k as f64 / n as f64;
            let i = cum.partition_point(|&c| c < target).clamp(1, STEPS);
            let (c0, c1) = (cum[i - 1], cum[i]);
            let frac = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.0 };
            (i as f64 - 1.0 + frac) * h
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub intrinsics: FisheyeIntrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ellipse: Option<EllipseParams>,
    pub poses: Vec<CameraPose>,
}

impl CameraRig {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        self.intrinsics.validate()?;
        if self.poses.is_empty() {
            return Err(CameraError::DegenerateRig("rig has no poses".into()));
        }
        self.poses.iter().try_for_each(|p| p.validate())
    }

    pub fn camera(&self, index: usize) -> Camera {
        Camera {
            intrinsics: self.intrinsics,
            pose: self.poses[index],
        }
    }

    pub fn cameras(&self) -> impl Iterator<Item = Camera> + '_ {
        (0..self.poses.len()).map(|i| self.camera(i))
    }

    /// Sub-rig with the poses at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> CameraRig {
        CameraRig {
            intrinsics: self.intrinsics,
            ellipse: None,
            poses: indices.iter().map(|&i| self.poses[i]).collect(),
        }
    }
}

pub fn make_elliptical_rig(params: EllipseParams, intrinsics: FisheyeIntrinsics) -> Result<CameraRig, CameraError> {
    intrinsics.validate()?;
    if !(params.semi_axis_a > 0.0 && params.semi_axis_b > 0.0) {
        return Err(CameraError::DegenerateRig(format!(
            "semi-axes must be positive, got {} and {}",
            params.semi_axis_a, params.semi_axis_b
        )));
    }
    if params.n == 0 {
        return Err(CameraError::DegenerateRig("n must be >= 1".into()));
    }
    let poses = params
        .parameter_angles()
        .into_iter()
        .map(|phi| {
            let position = params.point(phi);
            let radial = Vec3::new(params.semi_axis_a * phi.cos(), params.semi_axis_b * phi.sin(), 0.0).normalized();
            let forward = match params.look {
                LookDirection::Outward => radial,
                LookDirection::Inward => -radial,
            };
            CameraPose::looking(position, forward, Vec3::UP)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CameraRig {
        intrinsics,
        ellipse: Some(params),
        poses,
    })
}
