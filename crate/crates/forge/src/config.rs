use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use forge_core::camera::{make_elliptical_rig, CameraRig, EllipseParams, FisheyeIntrinsics};
use forge_core::field::{DistillConfig, RenderConfig};
use forge_core::olat::LightingSpec;
use forge_core::scene::{RenderOptions, SceneDesc};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub cameras: usize,
    /// Ellipse semi-axes as fractions of the room's x and y extent.
    pub semi_axis_fraction: [f64; 2],
    pub height: f64,
    pub fov_deg: f64,
}

impl RigConfig {
    pub fn ellipse(&self, scene: &SceneDesc) -> EllipseParams {
        let mut p = scene.default_rig_params(self.cameras);
        let s = scene.room.size();
        p.semi_axis_a = self.semi_axis_fraction[0] * s.x;
        p.semi_axis_b = self.semi_axis_fraction[1] * s.y;
        p.height = self.height;
        p
    }

    pub fn build(&self, scene: &SceneDesc, resolution: usize) -> anyhow::Result<CameraRig> {
        let intr = FisheyeIntrinsics::full_circle(resolution, resolution, self.fov_deg)?;
        Ok(make_elliptical_rig(self.ellipse(scene), intr)?)
    }
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            cameras: 90,
            semi_axis_fraction: [0.18, 0.18],
            height: 1.3,
            fov_deg: 180.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub resolution: usize,
    /// Grid padding around the room, as a fraction of each room extent.
    pub margin: f64,
    pub gain: f64,
    pub init_density: f64,
    pub render: RenderConfig,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            margin: 0.02,
            gain: forge_core::field::DEFAULT_GAIN,
            init_density: -0.2,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene_seed: u64,
    #[serde(default)]
    pub rig: RigConfig,
    pub resolution: usize,
    /// Training frames; the remaining rig cameras are held out.
    pub frames: usize,
    /// Target lighting, inline or as a path relative to the config file.
    pub lighting: LightingSource,
    /// Replace the target exposure with the input lighting's.
    #[serde(default)]
    pub keep_input_exposure: bool,
    /// Input lighting; every light white and the sun at 1 when absent, with
    /// an exposure chosen from the first view.
    #[serde(default)]
    pub input_lighting: Option<LightingSpec>,
    #[serde(default)]
    pub render: RenderOptions,
    #[serde(default)]
    pub field: FieldConfig,
    /// Fit to the input-lighting frames before distilling; `None` starts
    /// distillation from the untrained grid.
    #[serde(default)]
    pub reconstruct: Option<DistillConfig>,
    #[serde(default)]
    pub distill: DistillConfig,
    /// Where `pipeline run` writes its report and held-out renders.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LightingSource {
    Path(PathBuf),
    Inline(LightingSpec),
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let LightingSource::Path(p) = &cfg.lighting {
            let p = if p.is_relative() {
                path.parent().unwrap_or(Path::new(".")).join(p)
            } else {
                p.clone()
            };
            cfg.lighting = LightingSource::Inline(load_spec(&p)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lighting(&self) -> anyhow::Result<LightingSpec> {
        match &self.lighting {
            LightingSource::Inline(s) => Ok(s.clone()),
            LightingSource::Path(p) => load_spec(p),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.frames == 0 {
            bail!("frames must be at least 1");
        }
        if self.frames > self.rig.cameras {
            bail!("frames ({}) exceeds rig cameras ({})", self.frames, self.rig.cameras);
        }
        if self.resolution == 0 {
            bail!("resolution must be positive");
        }
        self.field.render.validate()?;
        Ok(())
    }

    /// Held-out camera indices, evenly spread over the rig.
    pub fn held_out(&self) -> Vec<usize> {
        let held = self.rig.cameras - self.frames;
        (0..held)
            .map(|k| ((k as f64 + 0.5) * self.rig.cameras as f64 / held as f64) as usize)
            .collect()
    }

    pub fn training(&self) -> Vec<usize> {
        let held = self.held_out();
        (0..self.rig.cameras).filter(|i| !held.contains(i)).collect()
    }
}

pub fn load_spec(path: &Path) -> anyhow::Result<LightingSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading lighting spec {}", path.display()))?;
    let spec: LightingSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing lighting spec {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}
