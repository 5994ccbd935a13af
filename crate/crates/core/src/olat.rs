//! OLAT bases, lighting specifications and the linear compositor.
//!
//! A [`LightBasis`] holds one linear HDR image per light source for a single
//! view: index 0 is light entering from outside (the sun through the window),
//! indices `1..=L` are the interior fixtures. Any target lighting is the
//! per-light color-weighted sum of the basis, scaled by an exposure and tone
//! mapped.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hdr::{blackbody_rgb, hsv_to_rgb, tone_map_srgb, HdrImage, ImageError, LdrImage, Rgb};

#[derive(Debug, Error, PartialEq)]
pub enum OlatError {
    #[error("lighting spec references light {0}, which is not in the basis")]
    UnknownLight(u32),
    #[error("basis image {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        index: usize,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("basis needs at least two images (exterior plus one interior light), got {0}")]
    TooFewImages(usize),
    #[error("invalid lighting spec at {path}: {message}")]
    InvalidSpec { path: String, message: String },
    #[error("at least one light must be on")]
    AllOff,
    #[error("exposure percentile undefined: {0}")]
    Exposure(String),
    #[error("light sampling gave up after {0} all-off draws")]
    SamplingExhausted(usize),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Target lighting: per-light color, exterior intensity and exposure.
///
/// JSON: `{"lights": {"1": [r, g, b] | null, ...}, "sun": s, "exposure": e}`.
/// `null` or a missing id means the light is off. `"identity": true` marks
/// a request to keep the input lighting unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightingSpec {
    #[serde(default)]
    pub lights: BTreeMap<u32, Option<Rgb>>,
    #[serde(default)]
    pub sun: f32,
    #[serde(default = "default_exposure")]
    pub exposure: f32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub identity: bool,
}

fn default_exposure() -> f32 {
    1.0
}

impl Default for LightingSpec {
    fn default() -> Self {
        Self {
            lights: BTreeMap::new(),
            sun: 0.0,
            exposure: 1.0,
            identity: false,
        }
    }
}

impl LightingSpec {
    pub fn identity() -> Self {
        Self {
            identity: true,
            ..Self::default()
        }
    }

    /// Every interior light at white, sun at `sun`, exposure `exposure`.
    pub fn all_on(num_lights: usize, sun: f32, exposure: f32) -> Self {
        Self {
            lights: (1..=num_lights as u32).map(|id| (id, Some([1.0; 3]))).collect(),
            sun,
            exposure,
            identity: false,
        }
    }

    pub fn with_light(mut self, id: u32, color: Option<Rgb>) -> Self {
        self.lights.insert(id, color);
        self
    }

    pub fn color(&self, id: u32) -> Option<Rgb> {
        self.lights.get(&id).copied().flatten()
    }

    /// Per-basis-index weights: `[sun; 3]` at 0, `c_l` (or zero) at `l`.
    pub fn weights(&self, num_interior: usize) -> Vec<Rgb> {
        let mut w = vec![[0.0f32; 3]; num_interior + 1];
        w[0] = [self.sun; 3];
        for (&id, c) in &self.lights {
            if let Some(c) = c {
                if (id as usize) <= num_interior && id >= 1 {
                    w[id as usize] = *c;
                }
            }
        }
        w
    }

    pub fn any_on(&self) -> bool {
        self.sun > 0.0 || self.lights.values().flatten().any(|c| c.iter().any(|&v| v > 0.0))
    }

    /// Range checks with a JSON-pointer-like path for the first violation.
    /// Does not require any light to be on; see [`LightingSpec::validate_request`].
    pub fn validate(&self) -> Result<(), OlatError> {
        let invalid = |path: String, message: String| OlatError::InvalidSpec { path, message };
        for (&id, c) in &self.lights {
            if id == 0 {
                return Err(invalid(
                    "lights/0".into(),
                    "light ids start at 1; the exterior light is set through \"sun\"".into(),
                ));
            }
            if let Some(c) = c {
                for (k, &v) in c.iter().enumerate() {
                    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                        return Err(invalid(format!("lights/{id}/{k}"), format!("{v} is outside [0, 1]")));
                    }
                }
            }
        }
        if !self.sun.is_finite() || self.sun < 0.0 {
            return Err(invalid("sun".into(), format!("{} must be a finite value >= 0", self.sun)));
        }
        if !self.exposure.is_finite() || self.exposure <= 0.0 {
            return Err(invalid("exposure".into(), format!("{} must be a finite value > 0", self.exposure)));
        }
        Ok(())
    }

    /// Validation for a relighting request: ranges plus at least one source on,
    /// unless the spec is the explicit no-edit identity.
    pub fn validate_request(&self) -> Result<(), OlatError> {
        self.validate()?;
        if !self.identity && !self.any_on() {
            return Err(OlatError::AllOff);
        }
        Ok(())
    }

    pub fn check_ids(&self, num_interior: usize) -> Result<(), OlatError> {
        match self.lights.keys().find(|&&id| id == 0 || id as usize > num_interior) {
            Some(&id) => Err(OlatError::UnknownLight(id)),
            None => Ok(()),
        }
    }
}

/// OLAT images for one view; `images[0]` is the exterior light.
#[derive(Clone, Debug, PartialEq)]
pub struct LightBasis {
    pub scene_id: u64,
    pub frame_id: usize,
    images: Vec<HdrImage>,
}

impl LightBasis {
    pub fn new(scene_id: u64, frame_id: usize, images: Vec<HdrImage>) -> Result<Self, OlatError> {
        if images.len() < 2 {
            return Err(OlatError::TooFewImages(images.len()));
        }
        let (want_w, want_h) = images[0].dims();
        for (index, img) in images.iter().enumerate() {
            let (got_w, got_h) = img.dims();
            if (got_w, got_h) != (want_w, want_h) {
                return Err(OlatError::DimensionMismatch {
                    index,
                    got_w,
                    got_h,
                    want_w,
                    want_h,
                });
            }
            img.validate(Some(frame_id))?;
        }
        Ok(Self {
            scene_id,
            frame_id,
            images,
        })
    }

    pub fn images(&self) -> &[HdrImage] {
        &self.images
    }

    pub fn num_interior(&self) -> usize {
        self.images.len() - 1
    }

    pub fn dims(&self) -> (usize, usize) {
        self.images[0].dims()
    }
}

/// `e * sum_l c_l * I_l`, before tone mapping.
///
/// Terms are accumulated per pixel in f64 in basis order (exterior first),
/// the exposure is applied to the finished sum, and the result is rounded
/// once to f32.
pub fn composite_hdr(basis: &LightBasis, spec: &LightingSpec) -> Result<HdrImage, OlatError> {
    spec.validate()?;
    spec.check_ids(basis.num_interior())?;
    let weights = spec.weights(basis.num_interior());
    let (w, h) = basis.dims();
    let e = spec.exposure as f64;
    let mut out = HdrImage::zeros(w, h);
    for (i, px) in out.pixels_mut().iter_mut().enumerate() {
        let mut acc = [0.0f64; 3];
        for (img, c) in basis.images.iter().zip(&weights) {
            let p = img.pixels()[i];
            for k in 0..3 {
                acc[k] += c[k] as f64 * p[k] as f64;
            }
        }
        *px = acc.map(|a| (e * a) as f32);
    }
    Ok(out)
}

/// Tone-mapped composite `gamma(e * sum_l c_l * I_l)`.
pub fn composite(basis: &LightBasis, spec: &LightingSpec) -> Result<LdrImage, OlatError> {
    let hdr = composite_hdr(basis, spec)?;
    Ok(tone_map_srgb(&hdr)?)
}

pub fn luminance(p: Rgb) -> f64 {
    0.2126 * p[0] as f64 + 0.7152 * p[1] as f64 + 0.0722 * p[2] as f64
}

/// Exposure mapping the `percentile` luminance (nearest rank) to 1.0,
/// clamped to `[1e-3, 1e3]`.
pub fn choose_exposure(img: &HdrImage, percentile: f64) -> Result<f32, OlatError> {
    if !(percentile > 0.0 && percentile <= 1.0) {
        return Err(OlatError::Exposure(format!("percentile {percentile} outside (0, 1]")));
    }
    let mut lum: Vec<f64> = img.pixels().iter().map(|&p| luminance(p)).collect();
    if lum.iter().all(|&l| l == 0.0) {
        return Err(OlatError::Exposure("image is all zero".into()));
    }
    lum.sort_by(|a, b| a.total_cmp(b));
    let rank = ((percentile * lum.len() as f64).ceil() as usize).clamp(1, lum.len());
    let value = lum[rank - 1];
    let e = if value > 0.0 { 1.0 / value } else { f64::INFINITY };
    Ok(e.clamp(1e-3, 1e3) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorBranch {
    Blackbody,
    Hsv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledLighting {
    pub spec: LightingSpec,
    pub branch: ColorBranch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightSamplingPolicy {
    /// Whether the exterior light takes part in the on/off coin flips.
    pub include_exterior: bool,
    pub p_on: f64,
    pub p_blackbody: f64,
    pub temperature_range: (f64, f64),
    pub max_attempts: usize,
}

impl Default for LightSamplingPolicy {
    fn default() -> Self {
        Self {
            include_exterior: true,
            p_on: 0.5,
            p_blackbody: 0.8,
            temperature_range: (2500.0, 10500.0),
            max_attempts: 64,
        }
    }
}

/// Draws a training lighting condition.
///
/// Each source is switched on with probability `p_on`; draws with every
/// source off are rejected. One branch is picked per draw: blackbody colors
/// at uniform temperatures, or uniform HSV colors. An exterior light that is
/// on gets a uniform scalar intensity in `(0, 1]`. Exposure is left at 1.
pub fn sample_lighting<R: Rng + ?Sized>(
    num_interior: usize,
    policy: &LightSamplingPolicy,
    rng: &mut R,
) -> Result<SampledLighting, OlatError> {
    let sources = num_interior + usize::from(policy.include_exterior);
    if sources == 0 {
        return Err(OlatError::InvalidSpec {
            path: "lights".into(),
            message: "no light sources to sample".into(),
        });
    }
    let mut pattern = vec![false; sources];
    let mut accepted = false;
    for _ in 0..policy.max_attempts {
        for on in pattern.iter_mut() {
            *on = rng.gen_bool(policy.p_on);
        }
        if pattern.iter().any(|&on| on) {
            accepted = true;
            break;
        }
    }
    if !accepted {
        return Err(OlatError::SamplingExhausted(policy.max_attempts));
    }
    let branch = if rng.gen_bool(policy.p_blackbody) {
        ColorBranch::Blackbody
    } else {
        ColorBranch::Hsv
    };
    let (interior, exterior) = if policy.include_exterior {
        (&pattern[1..], Some(pattern[0]))
    } else {
        (&pattern[..], None)
    };
    let mut spec = LightingSpec::default();
    for (k, &on) in interior.iter().enumerate() {
        let color = if on {
            Some(match branch {
                ColorBranch::Blackbody => {
                    let (lo, hi) = policy.temperature_range;
                    blackbody_rgb(rng.gen_range(lo..=hi)).expect("temperature range lies in the valid domain")
                }
                ColorBranch::Hsv => hsv_to_rgb(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>())
                    .expect("unit-interval samples are valid HSV"),
            })
        } else {
            None
        };
        spec.lights.insert(k as u32 + 1, color);
    }
    if exterior == Some(true) {
        // (0, 1] so an "on" exterior light is never exactly dark
        spec.sun = 1.0 - rng.gen::<f32>();
    }
    Ok(SampledLighting { spec, branch })
}
