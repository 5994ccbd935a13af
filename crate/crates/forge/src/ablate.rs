//! Timestep-sampler ablation on the toy relighting task.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use forge_core::conditioning::build_condition_video;
use forge_core::diffusion::{train_toy, LossCurve, SamplerMode, ToyExample, TrainConfig};
use forge_core::hdr::Rgb;
use forge_core::olat::{composite, sample_lighting, LightSamplingPolicy};
use forge_core::scene::{generate_scene, RenderOptions, DEFAULT_SPLAT_RADIUS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RigConfig;
use crate::pipeline::{default_input_lighting, render_bases};
use crate::store::{write_atomic, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub scene_seed: u64,
    pub resolution: usize,
    pub views: usize,
    pub examples: usize,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub render: RenderOptions,
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            scene_seed: 0,
            resolution: 16,
            views: 8,
            examples: 12,
            seeds: (0..5).collect(),
            data_seed: 7,
            render: RenderOptions {
                spp: 2,
                seed: 1,
                indirect: false,
                area_samples: 2,
            },
            train: TrainConfig::default(),
        }
    }
}

/// Toy examples: each pairs a view under the all-on input lighting with the
/// same view under a sampled lighting, plus that lighting's condition frame.
pub fn build_dataset(cfg: &AblationConfig) -> anyhow::Result<Vec<ToyExample>> {
    let scene = generate_scene(cfg.scene_seed);
    let rig_cfg = RigConfig {
        cameras: cfg.views,
        ..RigConfig::default()
    };
    let rig = rig_cfg.build(&scene, cfg.resolution)?;
    let bases = render_bases(&scene, cfg.scene_seed, &rig, &cfg.render)?;
    let n = scene.num_lights();
    let input = default_input_lighting(n, &bases[0])?;
    let masks: Vec<BTreeMap<u32, Vec<_>>> = rig
        .cameras()
        .map(|cam| {
            scene
                .lights
                .iter()
                .map(|l| Ok((l.id, vec![scene.render_light_visibility(&cam, l.id as usize, DEFAULT_SPLAT_RADIUS)?])))
                .collect::<anyhow::Result<_>>()
        })
        .collect::<anyhow::Result<_>>()?;
    let policy = LightSamplingPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let r = cfg.resolution;
    (0..cfg.examples)
        .map(|i| {
            let v = i % bases.len();
            let mut spec = sample_lighting(n, &policy, &mut rng)?.spec;
            spec.exposure = input.exposure;
            let edits: BTreeMap<u32, Rgb> = scene.lights.iter().map(|l| (l.id, spec.color(l.id).unwrap_or([0.0; 3]))).collect();
            let condition = build_condition_video(&masks[v], &edits, 1, r, r)?;
            Ok(ToyExample {
                width: r,
                height: r,
                input: composite(&bases[v], &input)?.pixels().to_vec(),
                condition: condition.frame(0).to_vec(),
                sun: spec.sun as f64,
                exposure: spec.exposure as f64,
                target: composite(&bases[v], &spec)?.pixels().to_vec(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub arm: SamplerMode,
    pub final_val: f64,
    pub best_val: f64,
    /// Mean training loss over the last 100 steps.
    pub late_train: f64,
    pub all_finite: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: SamplerMode,
    pub mean_final_val: f64,
    pub std_final_val: f64,
    pub mean_late_train: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub runs: Vec<RunSummary>,
    pub arms: Vec<ArmSummary>,
    /// Arm with the lower mean final validation loss.
    pub lower_final_val: SamplerMode,
    /// `(biased - uniform) / uniform` of the mean final validation loss.
    pub relative_difference: f64,
    pub all_finite: bool,
    pub curves: Vec<LossCurve>,
}

fn summarize(curve: &LossCurve) -> RunSummary {
    let tail = &curve.train[curve.train.len().saturating_sub(100)..];
    RunSummary {
        seed: curve.seed,
        arm: curve.mode,
        final_val: curve.val.last().map(|p| p.loss).unwrap_or(f64::NAN),
        best_val: curve.val.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min),
        late_train: tail.iter().map(|p| p.loss).sum::<f64>() / tail.len().max(1) as f64,
        all_finite: curve.all_finite(),
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn run(cfg: &AblationConfig, log: &mut dyn FnMut(&str)) -> anyhow::Result<AblationReport> {
    let data = build_dataset(cfg)?;
    let mut curves = Vec::new();
    for &seed in &cfg.seeds {
        for arm in [SamplerMode::Biased, SamplerMode::Uniform] {
            let (_, curve) = train_toy(&data, arm, seed, &cfg.train)?;
            let s = summarize(&curve);
            log(&format!("seed {seed} {:<7} final val {:.5}", arm.name(), s.final_val));
            curves.push(curve);
        }
    }
    let runs: Vec<RunSummary> = curves.iter().map(summarize).collect();
    let arms: Vec<ArmSummary> = [SamplerMode::Biased, SamplerMode::Uniform]
        .into_iter()
        .map(|arm| {
            let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.arm == arm).collect();
            let (mean_final_val, std_final_val) = mean_std(&mine.iter().map(|r| r.final_val).collect::<Vec<_>>());
            let (mean_late_train, _) = mean_std(&mine.iter().map(|r| r.late_train).collect::<Vec<_>>());
            ArmSummary {
                arm,
                mean_final_val,
                std_final_val,
                mean_late_train,
            }
        })
        .collect();
    let (b, u) = (arms[0].mean_final_val, arms[1].mean_final_val);
    Ok(AblationReport {
        config: cfg.clone(),
        all_finite: runs.iter().all(|r| r.all_finite),
        lower_final_val: if b <= u { SamplerMode::Biased } else { SamplerMode::Uniform },
        relative_difference: (b - u) / u,
        runs,
        arms,
        curves,
    })
}

/// Writes `ablation.json`, `ablation.csv` (one row per run) and
/// `ablation_curves.csv` (every logged loss).
pub fn write_report(dir: &Path, report: &AblationReport) -> anyhow::Result<()> {
    write_json(&dir.join("ablation.json"), report)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "arm", "final_val", "best_val", "late_train", "all_finite"])?;
    for r in &report.runs {
        w.write_record([
            r.seed.to_string(),
            r.arm.name().to_string(),
            format!("{:.8e}", r.final_val),
            format!("{:.8e}", r.best_val),
            format!("{:.8e}", r.late_train),
            r.all_finite.to_string(),
        ])?;
    }
    write_atomic(&dir.join("ablation.csv"), &w.into_inner().context("flushing csv")?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "arm", "split", "step", "loss"])?;
    for c in &report.curves {
        for (split, points) in [("train", &c.train), ("val", &c.val)] {
            for p in points {
                w.write_record([
                    c.seed.to_string(),
                    c.mode.name().to_string(),
                    split.to_string(),
                    p.step.to_string(),
                    format!("{:.8e}", p.loss),
                ])?;
            }
        }
    }
    write_atomic(&dir.join("ablation_curves.csv"), &w.into_inner().context("flushing csv")?)?;
    Ok(())
}
