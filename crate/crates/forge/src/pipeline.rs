//! Scene preparation, relighting, distillation and evaluation.

use std::collections::BTreeMap;
use std::fs;

use anyhow::{bail, Context};
use forge_core::camera::{Camera, CameraPose, CameraRig};
use forge_core::conditioning::{build_condition_video, ConditionVideo};
use forge_core::field::{distill, DistillConfig, DistillLog, RenderConfig, VoxelField};
use forge_core::hdr::{LdrImage, Rgb};
use forge_core::math::Vec3;
use forge_core::metrics::{psnr, ssim};
use forge_core::olat::{choose_exposure, composite, composite_hdr, LightBasis, LightingSpec, OlatError};
use forge_core::scene::{generate_scene, SceneDesc, DEFAULT_SPLAT_RADIUS};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::store::{
    read_basis, read_frame_set, read_json, write_atomic, write_basis, write_frame_set, write_json, DataRoot,
    FrameSetManifest, SceneMeta,
};

/// Percentile of composite luminance mapped to 1 by the default input exposure.
pub const EXPOSURE_PERCENTILE: f64 = 0.95;

/// A prepared scene loaded into memory: everything compositing needs.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub meta: SceneMeta,
    pub scene: SceneDesc,
    pub rig: CameraRig,
    pub bases: Vec<LightBasis>,
}

impl PreparedScene {
    pub fn load(root: &DataRoot, id: &str) -> anyhow::Result<Self> {
        let dir = root.scene_dir(id);
        if !dir.join("meta.json").exists() {
            bail!("scene {id} has not been prepared under {}", root.path().display());
        }
        let meta: SceneMeta = read_json(&dir.join("meta.json"))?;
        let scene: SceneDesc = read_json(&dir.join("scene.json"))?;
        let rig: CameraRig = read_json(&dir.join("rig.json"))?;
        let (_, bases) = read_basis(&dir.join("basis"))?;
        if bases.len() != rig.len() {
            bail!("basis has {} cameras, rig has {}", bases.len(), rig.len());
        }
        Ok(Self { meta, scene, rig, bases })
    }

    pub fn num_lights(&self) -> usize {
        self.scene.num_lights()
    }

    /// Range, light-id and at-least-one-on checks for a relight request.
    pub fn check_spec(&self, spec: &LightingSpec) -> Result<(), OlatError> {
        spec.validate_request()?;
        spec.check_ids(self.num_lights())
    }

    /// The spec to composite: identity requests keep the input lighting.
    pub fn resolve(&self, spec: &LightingSpec) -> LightingSpec {
        if spec.identity {
            self.meta.input_lighting.clone()
        } else {
            spec.clone()
        }
    }

    pub fn composite(&self, spec: &LightingSpec, cameras: &[usize]) -> Result<Vec<LdrImage>, OlatError> {
        cameras.iter().map(|&i| composite(&self.bases[i], spec)).collect()
    }

    pub fn cameras(&self, indices: &[usize]) -> Vec<Camera> {
        indices.iter().map(|&i| self.rig.camera(i)).collect()
    }

    pub fn field(&self, root: &DataRoot) -> anyhow::Result<VoxelField> {
        load_field(&root.scene_dir(&self.meta.id).join("field.vxf"))
    }

    /// Condition video of `target` relative to the input lighting over the
    /// training views.
    pub fn condition_video(&self, target: &LightingSpec) -> anyhow::Result<ConditionVideo> {
        let edits = changed_lights(&self.scene, &self.meta.input_lighting, target);
        condition_video(&self.scene, &self.cameras(&self.meta.training), &edits)
    }

    /// A fisheye camera on a horizontal circle of `radius` around the rig
    /// center, looking along `yaw` (from +x towards +y) tilted up by
    /// `pitch`; angles in degrees.
    pub fn orbit_camera(&self, yaw_deg: f64, pitch_deg: f64, radius: f64) -> anyhow::Result<Camera> {
        if !(yaw_deg.is_finite() && pitch_deg.is_finite() && radius.is_finite()) {
            bail!("yaw, pitch and radius must be finite");
        }
        if pitch_deg.abs() >= 89.0 {
            bail!("pitch {pitch_deg} must be within (-89, 89) degrees");
        }
        if radius < 0.0 {
            bail!("radius {radius} must be >= 0");
        }
        let center = match &self.rig.ellipse {
            Some(e) => e.center + Vec3::new(0.0, 0.0, e.height),
            None => {
                let n = self.rig.poses.len() as f64;
                self.rig.poses.iter().fold(Vec3::ZERO, |a, p| a + p.position) * (1.0 / n)
            }
        };
        let (yaw, pitch) = (yaw_deg.to_radians(), pitch_deg.to_radians());
        let heading = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
        let position = center + heading * radius;
        let room = &self.scene.room;
        if !(0..3).all(|k| position[k] > room.min[k] + 0.05 && position[k] < room.max[k] - 0.05) {
            bail!("radius {radius} puts the camera outside the room");
        }
        let forward = heading * pitch.cos() + Vec3::UP * pitch.sin();
        Ok(Camera {
            intrinsics: self.rig.intrinsics,
            pose: CameraPose::looking(position, forward, Vec3::UP)?,
        })
    }
}

/// Lights whose color differs between two specs, mapped to their color in
/// `target` (black when off there).
pub fn changed_lights(scene: &SceneDesc, input: &LightingSpec, target: &LightingSpec) -> BTreeMap<u32, Rgb> {
    scene
        .lights
        .iter()
        .filter_map(|l| {
            let want = target.color(l.id).unwrap_or([0.0; 3]);
            (want != input.color(l.id).unwrap_or([0.0; 3])).then_some((l.id, want))
        })
        .collect()
}

/// Paints each edited light's color on the pixels that see it.
pub fn condition_video(scene: &SceneDesc, cameras: &[Camera], edits: &BTreeMap<u32, Rgb>) -> anyhow::Result<ConditionVideo> {
    let Some(first) = cameras.first() else { bail!("no cameras") };
    let mut masks = BTreeMap::new();
    for &id in edits.keys() {
        let m = cameras
            .iter()
            .map(|c| scene.render_light_visibility(c, id as usize, DEFAULT_SPLAT_RADIUS))
            .collect::<Result<Vec<_>, _>>()?;
        masks.insert(id, m);
    }
    Ok(build_condition_video(&masks, edits, cameras.len(), first.width(), first.height())?)
}

pub fn load_field(path: &std::path::Path) -> anyhow::Result<VoxelField> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(VoxelField::from_checkpoint(&bytes)?)
}

/// OLAT bases for every rig camera.
pub fn render_bases(scene: &SceneDesc, seed: u64, rig: &CameraRig, opts: &forge_core::scene::RenderOptions) -> anyhow::Result<Vec<LightBasis>> {
    rig.cameras()
        .enumerate()
        .map(|(i, cam)| Ok(LightBasis::new(seed, i, scene.render_basis(&cam, opts))?))
        .collect()
}

/// Every light white and the sun at 1, exposed so that 95% of the first
/// view's luminance stays below 1.
pub fn default_input_lighting(num_lights: usize, first: &LightBasis) -> anyhow::Result<LightingSpec> {
    let probe = composite_hdr(first, &LightingSpec::all_on(num_lights, 1.0, 1.0))?;
    let e = choose_exposure(&probe, EXPOSURE_PERCENTILE)?;
    Ok(LightingSpec::all_on(num_lights, 1.0, e))
}

/// Generates the scene, renders its OLAT basis over the rig, writes the
/// input-lighting frame set and fits the field to it.
pub fn prepare(root: &DataRoot, id: &str, cfg: &PipelineConfig, log: &mut dyn FnMut(&str)) -> anyhow::Result<PreparedScene> {
    cfg.validate()?;
    let dir = root.scene_dir(id);
    let input_id = format!("{id}-input");
    for d in [dir.clone(), root.frame_set_dir(&input_id)] {
        if d.exists() {
            fs::remove_dir_all(&d).with_context(|| format!("removing {}", d.display()))?;
        }
    }
    let scene = generate_scene(cfg.scene_seed);
    let rig = cfg.rig.build(&scene, cfg.resolution)?;
    write_json(&dir.join("scene.json"), &scene)?;
    write_json(&dir.join("rig.json"), &rig)?;

    log(&format!("rendering OLAT basis: {} cameras x {} sources", rig.len(), scene.num_lights() + 1));
    let bases = render_bases(&scene, cfg.scene_seed, &rig, &cfg.render)?;
    write_basis(&dir.join("basis"), &bases, cfg.render)?;

    let input_lighting = match &cfg.input_lighting {
        Some(s) => {
            s.validate_request()?;
            s.check_ids(scene.num_lights())?;
            s.clone()
        }
        None => default_input_lighting(scene.num_lights(), &bases[0])?,
    };
    let meta = SceneMeta {
        id: id.to_string(),
        seed: cfg.scene_seed,
        resolution: cfg.resolution,
        training: cfg.training(),
        held_out: cfg.held_out(),
        input_lighting: input_lighting.clone(),
        input_frames: input_id.clone(),
        render: cfg.field.render,
        distill: cfg.distill,
    };
    let prepared = PreparedScene { meta, scene, rig, bases };
    let frames = prepared.composite(&input_lighting, &prepared.meta.training)?;
    write_frame_set(
        &root.frame_set_dir(&input_id),
        &frame_set_manifest(&prepared, &input_id, &input_lighting),
        &frames,
    )?;

    let size = prepared.scene.room.size();
    let margin = size * cfg.field.margin;
    let mut field = VoxelField::new(
        cfg.field.resolution,
        prepared.scene.room.min - margin,
        prepared.scene.room.max + margin,
        cfg.field.init_density,
        [0.0; 3],
        [0.0; 3],
    )?
    .with_gain(cfg.field.gain)?;
    if let Some(rec) = &cfg.reconstruct {
        log(&format!("fitting field to input lighting: {} iterations", rec.iters));
        let cams = prepared.cameras(&prepared.meta.training);
        distill(&mut field, &frames, &cams, rec)?;
    }
    write_atomic(&dir.join("field.vxf"), &field.to_checkpoint())?;
    write_json(&dir.join("meta.json"), &prepared.meta)?;
    Ok(prepared)
}

fn frame_set_manifest(prepared: &PreparedScene, id: &str, requested: &LightingSpec) -> FrameSetManifest {
    let training = &prepared.meta.training;
    FrameSetManifest {
        id: id.to_string(),
        scene: prepared.meta.id.clone(),
        frames: (0..training.len()).collect(),
        cameras: training.clone(),
        rig: prepared.rig.select(training),
        lighting: requested.clone(),
        resolved: prepared.resolve(requested),
        field: None,
    }
}

/// Composites the training views under `spec` into a new frame set.
pub fn relight(root: &DataRoot, prepared: &PreparedScene, spec: &LightingSpec) -> anyhow::Result<FrameSetManifest> {
    prepared.check_spec(spec)?;
    let resolved = prepared.resolve(spec);
    let frames = prepared.composite(&resolved, &prepared.meta.training)?;
    let id = root.reserve_frame_set(&format!("{}-relit", prepared.meta.id))?;
    let manifest = frame_set_manifest(prepared, &id, spec);
    write_frame_set(&root.frame_set_dir(&id), &manifest, &frames)?;
    Ok(manifest)
}

/// Writes the condition video of a frame set as `condition/<k>.pfm`.
pub fn write_condition(root: &DataRoot, prepared: &PreparedScene, manifest: &FrameSetManifest) -> anyhow::Result<ConditionVideo> {
    let video = prepared.condition_video(&manifest.resolved)?;
    let dir = root.frame_set_dir(&manifest.id).join("condition");
    for (t, k) in manifest.frames.iter().enumerate() {
        write_atomic(&dir.join(format!("{k}.pfm")), &video.frame_to_pfm(t))?;
    }
    Ok(video)
}

/// Distills the scene's fitted field into a frame set's frames and stores
/// the result as the frame set's `field.vxf`.
pub fn distill_frame_set(
    root: &DataRoot,
    prepared: &PreparedScene,
    frame_set: &str,
    cfg: &DistillConfig,
) -> anyhow::Result<(VoxelField, DistillLog)> {
    let dir = root.frame_set_dir(frame_set);
    let (mut manifest, frames) = read_frame_set(&dir)?;
    let mut field = prepared.field(root)?;
    let log = distill(&mut field, &frames, &prepared.cameras(&manifest.cameras), cfg)?;
    write_atomic(&dir.join("field.vxf"), &field.to_checkpoint())?;
    manifest.field = Some("field.vxf".into());
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok((field, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub camera: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub views: Vec<ViewScore>,
}

impl EvalReport {
    pub fn from_pairs(cameras: &[usize], pred: &[LdrImage], truth: &[LdrImage]) -> anyhow::Result<Self> {
        if pred.len() != truth.len() || pred.is_empty() {
            bail!("cannot compare {} predictions with {} references", pred.len(), truth.len());
        }
        let views = cameras
            .iter()
            .zip(pred.iter().zip(truth))
            .map(|(&camera, (p, t))| {
                Ok(ViewScore {
                    camera,
                    psnr: psnr(p, t)?,
                    ssim: ssim(p, t)?,
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let n = views.len() as f64;
        Ok(Self {
            psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
            ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
            views,
        })
    }
}

/// Renders the field from the held-out cameras without jitter.
pub fn render_views(field: &VoxelField, cameras: &[Camera], render: &RenderConfig) -> anyhow::Result<Vec<LdrImage>> {
    let cfg = RenderConfig { jitter: false, ..*render };
    cameras.iter().map(|c| Ok(field.render_view(c, &cfg)?)).collect()
}

/// Held-out novel views of `field` against the OLAT composite of `spec`.
pub fn evaluate_held_out(prepared: &PreparedScene, field: &VoxelField, spec: &LightingSpec) -> anyhow::Result<(EvalReport, Vec<LdrImage>)> {
    let held = &prepared.meta.held_out;
    let truth = prepared.composite(&prepared.resolve(spec), held)?;
    let pred = render_views(field, &prepared.cameras(held), &prepared.meta.render)?;
    Ok((EvalReport::from_pairs(held, &pred, &truth)?, pred))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scene: String,
    pub frame_set: String,
    pub training_frames: usize,
    pub distill_iters: usize,
    pub final_loss: f64,
    pub held_out: EvalReport,
}

/// The whole pipeline: prepare, relight the training views by the OLAT
/// oracle, distill, and score held-out novel views.
pub fn run(root: &DataRoot, id: &str, cfg: &PipelineConfig, log: &mut dyn FnMut(&str)) -> anyhow::Result<RunReport> {
    let prepared = prepare(root, id, cfg, log)?;
    let mut spec = cfg.lighting()?;
    if cfg.keep_input_exposure {
        spec.exposure = prepared.meta.input_lighting.exposure;
    }
    let manifest = relight(root, &prepared, &spec)?;
    log(&format!("distilling {} frames: {} iterations", manifest.frames.len(), cfg.distill.iters));
    let (field, dlog) = distill_frame_set(root, &prepared, &manifest.id, &cfg.distill)?;
    let (held_out, renders) = evaluate_held_out(&prepared, &field, &spec)?;
    let report = RunReport {
        scene: id.to_string(),
        frame_set: manifest.id.clone(),
        training_frames: manifest.frames.len(),
        distill_iters: cfg.distill.iters,
        final_loss: dlog.loss.last().copied().unwrap_or(f64::NAN),
        held_out,
    };
    write_json(&root.frame_set_dir(&manifest.id).join("report.json"), &report)?;
    if let Some(out) = &cfg.output_dir {
        for (cam, img) in prepared.meta.held_out.iter().zip(&renders) {
            write_atomic(&out.join(format!("novel_{cam:03}.png")), &img.to_png())?;
        }
        write_json(&out.join("report.json"), &report)?;
    }
    Ok(report)
}
