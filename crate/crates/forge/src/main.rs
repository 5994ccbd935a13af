use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use forge_core::camera::{make_elliptical_rig, CameraRig, FisheyeIntrinsics};
use forge_core::field::{distill, DistillConfig, RenderConfig, VoxelField, DEFAULT_GAIN};
use forge_core::hdr::Rgb;
use forge_core::olat::composite;
use forge_core::scene::{generate_scene, RenderOptions, SceneDesc};
use forge::ablate::{self, AblationConfig};
use forge::config::{load_spec, PipelineConfig};
use forge::pipeline::{self, changed_lights, condition_video, load_field, render_bases, render_views, EvalReport};
use forge::store::{
    read_basis, read_frame_set, read_json, read_png, write_atomic, write_basis, write_frame_set, write_json, DataRoot,
    FrameSetManifest,
};

/// Desk-scale OLAT relighting: procedural scenes, light bases, compositing,
/// radiance-field distillation and a relighting service.
#[derive(Parser)]
#[command(name = "forge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Procedural scenes.
    #[command(subcommand)]
    Scene(SceneCmd),
    /// One-light-at-a-time rendering.
    #[command(subcommand)]
    Olat(OlatCmd),
    /// Relighting from an OLAT basis.
    #[command(subcommand)]
    Relight(RelightCmd),
    /// Condition videos.
    #[command(subcommand)]
    Condition(ConditionCmd),
    /// Fit a voxel field to a frame set.
    Distill(DistillArgs),
    /// Render a voxel field.
    #[command(subcommand)]
    Render(RenderCmd),
    /// Print PSNR/SSIM JSON for two directories of PNG frames.
    Eval(EvalArgs),
    /// Ablation studies.
    #[command(subcommand)]
    Ablate(AblateCmd),
    /// Whole-pipeline runs under a data root.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Serve prepared scenes over HTTP.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum SceneCmd {
    /// Write the scene JSON for a seed.
    Gen {
        #[arg(long)]
        seed: u64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum OlatCmd {
    /// Render the OLAT basis of a scene over an elliptical fisheye rig.
    Render(OlatArgs),
}

#[derive(Args)]
struct OlatArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Output directory: rig.json plus manifest.json and `<camera>/<light>.pfm`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 90)]
    cameras: usize,
    #[arg(long, default_value_t = 180.0)]
    fov: f64,
    #[arg(long, default_value_t = 4)]
    spp: u32,
    #[arg(long, default_value_t = 3)]
    area_samples: u32,
    #[arg(long, default_value_t = 1)]
    render_seed: u64,
    /// Add one indirect bounce.
    #[arg(long)]
    indirect: bool,
}

#[derive(Subcommand)]
enum RelightCmd {
    /// Composite a lighting spec from a basis into a PNG frame set.
    Composite {
        /// Directory written by `forge olat render`.
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        /// Spec an identity request resolves to.
        #[arg(long)]
        input_spec: Option<PathBuf>,
        /// Comma-separated rig camera indices; all when absent.
        #[arg(long, value_delimiter = ',')]
        cameras: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ConditionCmd {
    /// Build the condition video of a spec for a frame set's cameras.
    Build {
        #[arg(long)]
        scene: PathBuf,
        /// Frame set whose cameras to use.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        /// Lights whose color matches this spec stay unedited; without it
        /// every light listed in `--spec` is edited.
        #[arg(long)]
        input_spec: Option<PathBuf>,
        /// Output directory of `<k>.pfm` frames.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DistillArgs {
    /// Frame set directory (manifest.json + PNGs).
    #[arg(long)]
    frames: PathBuf,
    /// Starting field; a fresh grid over the scene room otherwise.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Scene JSON, needed for a fresh grid.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    grid: usize,
    #[arg(long, default_value_t = DEFAULT_GAIN)]
    gain: f64,
    #[arg(long, default_value_t = -0.2, allow_hyphen_values = true)]
    init_density: f64,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8192)]
    rays: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration loss as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum RenderCmd {
    /// Render a field from rig cameras into `<camera>.png` files.
    Novel {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        rig: PathBuf,
        /// Comma-separated rig camera indices; all when absent.
        #[arg(long, value_delimiter = ',')]
        cameras: Option<Vec<usize>>,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Rendered frames.
    #[arg(long)]
    pred: PathBuf,
    /// Reference frames with the same file names.
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Subcommand)]
enum AblateCmd {
    /// Biased versus uniform timestep sampling on the toy relighter.
    Sampler {
        /// JSON AblationConfig; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Render the basis, write the input frames and fit the field.
    Prepare(PipelineArgs),
    /// Prepare, relight, distill and print the held-out evaluation.
    Run(PipelineArgs),
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Scene id under the data root; the config file stem by default.
    #[arg(long)]
    scene_id: Option<String>,
    #[arg(long, env = "FORGE_DATA_ROOT", default_value = "forge-data")]
    data_root: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "FORGE_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "FORGE_DATA_ROOT", default_value = "forge-data")]
    data_root: PathBuf,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Scene(SceneCmd::Gen { seed, out }) => {
            let mut text = serde_json::to_string_pretty(&generate_scene(seed))?;
            text.push('\n');
            match out {
                Some(p) => write_atomic(&p, text.as_bytes())?,
                None => print!("{text}"),
            }
        }
        Command::Olat(OlatCmd::Render(a)) => olat_render(a)?,
        Command::Relight(RelightCmd::Composite {
            basis,
            spec,
            input_spec,
            cameras,
            out,
        }) => relight_composite(&basis, &spec, input_spec.as_deref(), cameras, &out)?,
        Command::Condition(ConditionCmd::Build {
            scene,
            frames,
            spec,
            input_spec,
            out,
        }) => {
            let scene: SceneDesc = read_json(&scene)?;
            let manifest: FrameSetManifest = read_json(&frames.join("manifest.json"))?;
            let target = load_spec(&spec)?;
            target.check_ids(scene.num_lights())?;
            let edits: BTreeMap<u32, Rgb> = match input_spec {
                Some(p) => changed_lights(&scene, &load_spec(&p)?, &target),
                None => target.lights.iter().map(|(&id, c)| (id, c.unwrap_or([0.0; 3]))).collect(),
            };
            let video = condition_video(&scene, &manifest.rig.cameras().collect::<Vec<_>>(), &edits)?;
            for (t, k) in manifest.frames.iter().enumerate() {
                write_atomic(&out.join(format!("{k}.pfm")), &video.frame_to_pfm(t))?;
            }
            eprintln!("wrote {} condition frames to {}", manifest.frames.len(), out.display());
        }
        Command::Distill(a) => distill_cmd(a)?,
        Command::Render(RenderCmd::Novel {
            field,
            rig,
            cameras,
            samples,
            out,
        }) => {
            let field = load_field(&field)?;
            let rig: CameraRig = read_json(&rig)?;
            let idx = cameras.unwrap_or_else(|| (0..rig.len()).collect());
            if let Some(&bad) = idx.iter().find(|&&i| i >= rig.len()) {
                bail!("camera {bad} is not in the rig ({} cameras)", rig.len());
            }
            let cams: Vec<_> = idx.iter().map(|&i| rig.camera(i)).collect();
            let cfg = RenderConfig {
                samples,
                ..RenderConfig::default()
            };
            for (i, img) in idx.iter().zip(render_views(&field, &cams, &cfg)?) {
                write_atomic(&out.join(format!("{i}.png")), &img.to_png())?;
            }
        }
        Command::Eval(a) => print_json(&eval_dirs(&a.pred, &a.truth)?)?,
        Command::Ablate(AblateCmd::Sampler {
            config,
            seeds,
            steps,
            out,
        }) => {
            let mut cfg: AblationConfig = match config {
                Some(p) => read_json(&p)?,
                None => AblationConfig::default(),
            };
            if let Some(n) = seeds {
                cfg.seeds = (0..n).collect();
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let report = ablate::run(&cfg, &mut |m| progress(m))?;
            ablate::write_report(&out, &report)?;
            if !report.all_finite {
                bail!("non-finite loss in ablation; see {}", out.join("ablation.csv").display());
            }
            print_json(&serde_json::json!({
                "arms": report.arms,
                "lower_final_val": report.lower_final_val,
                "relative_difference": report.relative_difference,
                "all_finite": report.all_finite,
            }))?;
        }
        Command::Pipeline(cmd) => {
            let (a, full) = match cmd {
                PipelineCmd::Prepare(a) => (a, false),
                PipelineCmd::Run(a) => (a, true),
            };
            let cfg = PipelineConfig::load(&a.config)?;
            let id = match a.scene_id {
                Some(id) => id,
                None => a
                    .config
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .context("config path has no file name")?
                    .to_string(),
            };
            if !forge::store::valid_id(&id) {
                bail!("scene id {id:?} must be letters, digits, '-' or '_'");
            }
            let root = DataRoot::new(&a.data_root);
            if full {
                print_json(&pipeline::run(&root, &id, &cfg, &mut |m| progress(m))?)?;
            } else {
                let p = pipeline::prepare(&root, &id, &cfg, &mut |m| progress(m))?;
                eprintln!("prepared scene {id}: {} cameras, {} lights", p.rig.len(), p.num_lights());
            }
        }
        Command::Serve(a) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(forge::service::serve(DataRoot::new(a.data_root), a.port))?;
        }
    }
    Ok(())
}

fn olat_render(a: OlatArgs) -> anyhow::Result<()> {
    let scene: SceneDesc = read_json(&a.scene)?;
    scene.validate()?;
    let intr = FisheyeIntrinsics::full_circle(a.resolution, a.resolution, a.fov)?;
    let rig = make_elliptical_rig(scene.default_rig_params(a.cameras), intr)?;
    let opts = RenderOptions {
        spp: a.spp,
        seed: a.render_seed,
        indirect: a.indirect,
        area_samples: a.area_samples,
    };
    let bases = render_bases(&scene, scene.seed, &rig, &opts)?;
    write_basis(&a.out, &bases, opts)?;
    write_json(&a.out.join("rig.json"), &rig)?;
    eprintln!("wrote {} x {} OLAT images to {}", bases.len(), scene.num_lights() + 1, a.out.display());
    Ok(())
}

fn relight_composite(basis: &Path, spec: &Path, input: Option<&Path>, cameras: Option<Vec<usize>>, out: &Path) -> anyhow::Result<()> {
    let requested = load_spec(spec)?;
    requested.validate_request()?;
    let resolved = if requested.identity {
        match input {
            Some(p) => load_spec(p)?,
            None => bail!("an identity spec needs --input-spec"),
        }
    } else {
        requested.clone()
    };
    let (manifest, bases) = read_basis(basis)?;
    resolved.check_ids(manifest.lights)?;
    let rig: CameraRig = read_json(&basis.join("rig.json"))?;
    let idx = cameras.unwrap_or_else(|| (0..bases.len()).collect());
    if let Some(&bad) = idx.iter().find(|&&i| i >= bases.len()) {
        bail!("camera {bad} is not in the basis ({} cameras)", bases.len());
    }
    let frames = idx
        .iter()
        .map(|&i| composite(&bases[i], &resolved))
        .collect::<Result<Vec<_>, _>>()?;
    let name = out.file_name().and_then(|s| s.to_str()).unwrap_or("frames").to_string();
    let fs = FrameSetManifest {
        id: name,
        scene: manifest.scene_id.to_string(),
        frames: (0..idx.len()).collect(),
        cameras: idx.clone(),
        rig: rig.select(&idx),
        lighting: requested,
        resolved,
        field: None,
    };
    if out.exists() {
        fs::remove_dir_all(out).with_context(|| format!("replacing {}", out.display()))?;
    }
    write_frame_set(out, &fs, &frames)?;
    eprintln!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

fn distill_cmd(a: DistillArgs) -> anyhow::Result<()> {
    let (manifest, frames) = read_frame_set(&a.frames)?;
    let mut field = match (&a.init, &a.scene) {
        (Some(p), _) => load_field(p)?,
        (None, Some(s)) => {
            let scene: SceneDesc = read_json(s)?;
            let m = scene.room.size() * 0.02;
            VoxelField::new(a.grid, scene.room.min - m, scene.room.max + m, a.init_density, [0.0; 3], [0.0; 3])?
                .with_gain(a.gain)?
        }
        (None, None) => bail!("pass --init FIELD or --scene SCENE for a fresh grid"),
    };
    let cfg = DistillConfig {
        iters: a.iters,
        lr: a.lr,
        rays_per_iter: a.rays,
        seed: a.seed,
        render: RenderConfig {
            samples: a.samples,
            ..RenderConfig::default()
        },
    };
    let cams: Vec<_> = manifest.rig.cameras().collect();
    let log = distill(&mut field, &frames, &cams, &cfg)?;
    write_atomic(&a.out, &field.to_checkpoint())?;
    if let Some(p) = a.log {
        write_json(&p, &log)?;
    }
    eprintln!(
        "distilled {} frames for {} iterations; final batch loss {:.6}",
        frames.len(),
        a.iters,
        log.loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval_dirs(pred: &Path, truth: &Path) -> anyhow::Result<EvalReport> {
    let mut names: Vec<String> = fs::read_dir(pred)
        .with_context(|| format!("listing {}", pred.display()))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort_by_key(|n| (n.len(), n.clone()));
    if names.is_empty() {
        bail!("no PNG frames in {}", pred.display());
    }
    let mut p = Vec::new();
    let mut t = Vec::new();
    let mut ids = Vec::new();
    for (i, n) in names.iter().enumerate() {
        p.push(read_png(&pred.join(n))?);
        t.push(read_png(&truth.join(n)).with_context(|| format!("{n} has no reference"))?);
        ids.push(n.trim_end_matches(".png").parse().unwrap_or(i));
    }
    EvalReport::from_pairs(&ids, &p, &t)
}
