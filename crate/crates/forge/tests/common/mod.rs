#![allow(dead_code)]

use forge::config::{FieldConfig, LightingSource, PipelineConfig, RigConfig};
use forge::pipeline::{prepare, PreparedScene};
use forge::store::DataRoot;
use forge_core::field::{DistillConfig, RenderConfig};
use forge_core::olat::LightingSpec;
use forge_core::scene::RenderOptions;

/// A small scene: 10 cameras at 16x16, 8 training frames, an 8^3 grid.
pub fn small_config(distill_iters: usize) -> PipelineConfig {
    let render = RenderConfig {
        samples: 32,
        ..RenderConfig::default()
    };
    PipelineConfig {
        scene_seed: 3,
        rig: RigConfig {
            cameras: 10,
            ..RigConfig::default()
        },
        resolution: 16,
        frames: 8,
        lighting: LightingSource::Inline(LightingSpec::all_on(1, 0.5, 1.0)),
        keep_input_exposure: true,
        input_lighting: None,
        render: RenderOptions {
            spp: 1,
            seed: 1,
            indirect: false,
            area_samples: 2,
        },
        field: FieldConfig {
            resolution: 8,
            render,
            ..FieldConfig::default()
        },
        reconstruct: Some(DistillConfig {
            iters: 5,
            lr: 5e-3,
            rays_per_iter: 64,
            seed: 1,
            render,
        }),
        distill: DistillConfig {
            iters: distill_iters,
            lr: 1e-3,
            rays_per_iter: 256,
            seed: 2,
            render,
        },
        output_dir: None,
    }
}

pub fn prepared(root: &DataRoot, id: &str, distill_iters: usize) -> PreparedScene {
    prepare(root, id, &small_config(distill_iters), &mut |_| {}).unwrap()
}
