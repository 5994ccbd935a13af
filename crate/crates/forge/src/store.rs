//! On-disk layout of scenes, OLAT bases, frame sets and jobs.
//!
//! ```text
//! <root>/scenes/<scene>/scene.json      procedural scene
//! <root>/scenes/<scene>/rig.json        full capture rig
//! <root>/scenes/<scene>/meta.json       SceneMeta
//! <root>/scenes/<scene>/basis/          manifest.json + <camera>/<light>.pfm
//! <root>/scenes/<scene>/field.vxf       field fitted to the input lighting
//! <root>/framesets/<id>/                manifest.json + <k>.png [+ field.vxf]
//! <root>/jobs/<id>.json                 JobRecord
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use forge_core::camera::CameraRig;
use forge_core::field::{DistillConfig, RenderConfig};
use forge_core::hdr::{HdrImage, LdrImage};
use forge_core::olat::{LightBasis, LightingSpec};
use forge_core::scene::RenderOptions;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes through a sibling temp file so readers never see partial content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension(format!(
        "{}.partial",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {}", tmp.display()))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisManifest {
    pub scene_id: u64,
    pub cameras: usize,
    /// Interior lights; each camera has `lights + 1` images.
    pub lights: usize,
    pub width: usize,
    pub height: usize,
    pub render: RenderOptions,
}

pub fn write_basis(dir: &Path, bases: &[LightBasis], render: RenderOptions) -> anyhow::Result<()> {
    let Some(first) = bases.first() else { bail!("no basis to write") };
    let (width, height) = first.dims();
    for b in bases {
        for (l, img) in b.images().iter().enumerate() {
            write_atomic(&dir.join(format!("{:03}", b.frame_id)).join(format!("{l}.pfm")), &img.to_pfm())?;
        }
    }
    write_json(
        &dir.join("manifest.json"),
        &BasisManifest {
            scene_id: first.scene_id,
            cameras: bases.len(),
            lights: first.num_interior(),
            width,
            height,
            render,
        },
    )
}

pub fn read_basis(dir: &Path) -> anyhow::Result<(BasisManifest, Vec<LightBasis>)> {
    let manifest: BasisManifest = read_json(&dir.join("manifest.json"))?;
    let mut bases = Vec::with_capacity(manifest.cameras);
    for cam in 0..manifest.cameras {
        let images = (0..=manifest.lights)
            .map(|l| {
                let p = dir.join(format!("{cam:03}")).join(format!("{l}.pfm"));
                let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
                HdrImage::from_pfm(&bytes).with_context(|| format!("decoding {}", p.display()))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        bases.push(LightBasis::new(manifest.scene_id, cam, images)?);
    }
    Ok((manifest, bases))
}

/// Lists the frames of a relit set, the cameras that saw them and the
/// lighting that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSetManifest {
    pub id: String,
    pub scene: String,
    /// Frame ids, served as `<k>.png`.
    pub frames: Vec<usize>,
    /// Rig camera index of each frame.
    pub cameras: Vec<usize>,
    pub rig: CameraRig,
    /// The spec as requested.
    pub lighting: LightingSpec,
    /// The spec actually composited (identity requests resolve to the input).
    pub resolved: LightingSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

/// Writes a frame set into `dir`, building it under a `.partial` sibling
/// (possibly reserved by [`DataRoot::reserve_frame_set`]) first. Fails if
/// `dir` already exists.
pub fn write_frame_set(dir: &Path, manifest: &FrameSetManifest, frames: &[LdrImage]) -> anyhow::Result<()> {
    if frames.len() != manifest.frames.len() {
        bail!("{} frames for {} manifest entries", frames.len(), manifest.frames.len());
    }
    if dir.exists() {
        bail!("frame set {} already exists", dir.display());
    }
    let tmp = partial_dir(dir);
    fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    let result = (|| {
        for (&k, img) in manifest.frames.iter().zip(frames) {
            fs::write(tmp.join(format!("{k}.png")), img.to_png())?;
        }
        write_json(&tmp.join("manifest.json"), manifest)?;
        fs::rename(&tmp, dir).with_context(|| format!("renaming {}", tmp.display()))
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}

fn partial_dir(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

pub fn read_frame_set(dir: &Path) -> anyhow::Result<(FrameSetManifest, Vec<LdrImage>)> {
    let manifest: FrameSetManifest = read_json(&dir.join("manifest.json"))?;
    let frames = manifest
        .frames
        .iter()
        .map(|k| read_png(&dir.join(format!("{k}.png"))))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok((manifest, frames))
}

pub fn read_png(path: &Path) -> anyhow::Result<LdrImage> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    LdrImage::from_png(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Per-scene record written by `prepare`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub id: String,
    pub seed: u64,
    pub resolution: usize,
    pub training: Vec<usize>,
    pub held_out: Vec<usize>,
    pub input_lighting: LightingSpec,
    /// Frame set holding the training views under the input lighting.
    pub input_frames: String,
    pub render: RenderConfig,
    pub distill: DistillConfig,
}

#[derive(Clone, Debug)]
pub struct DataRoot {
    root: PathBuf,
}

impl DataRoot {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn scene_dir(&self, id: &str) -> PathBuf {
        self.root.join("scenes").join(id)
    }

    pub fn frame_set_dir(&self, id: &str) -> PathBuf {
        self.root.join("framesets").join(id)
    }

    pub fn job_path(&self, id: &str) -> PathBuf {
        self.root.join("jobs").join(format!("{id}.json"))
    }

    /// Creates a fresh frame set directory name `<prefix>-<n>` with the
    /// smallest unused `n`, reserving it by creating its `.partial` dir.
    pub fn reserve_frame_set(&self, prefix: &str) -> anyhow::Result<String> {
        let base = self.root.join("framesets");
        fs::create_dir_all(&base)?;
        for n in 0.. {
            let id = format!("{prefix}-{n}");
            let dir = base.join(&id);
            if dir.exists() {
                continue;
            }
            match fs::create_dir(partial_dir(&dir)) {
                Ok(()) => return Ok(id),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e.into()),
            }
        }
        unreachable!()
    }
}

/// Ids must be a single safe path segment.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}
