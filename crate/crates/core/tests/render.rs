use forge_core::camera::{make_elliptical_rig, Camera, CameraPose, FisheyeIntrinsics};
use forge_core::hdr::HdrImage;
use forge_core::math::Vec3;
use forge_core::olat::{sample_lighting, LightSamplingPolicy, LightingSpec};
use forge_core::scene::{generate_scene, LightDesc, LightKind, RenderOptions, SceneDesc, DEFAULT_SPLAT_RADIUS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rig_camera(scene: &SceneDesc, res: usize, index: usize, n: usize) -> Camera {
    let rig = make_elliptical_rig(scene.default_rig_params(n), FisheyeIntrinsics::full_circle(res, res, 180.0).unwrap()).unwrap();
    rig.camera(index)
}

/// `sum_l e * c_l * I_l` over a rendered basis.
fn weighted_sum(basis: &[HdrImage], spec: &LightingSpec) -> Vec<[f64; 3]> {
    let e = spec.exposure as f64;
    let mut coeff = vec![[spec.sun as f64; 3]];
    for id in 1..basis.len() as u32 {
        coeff.push(spec.color(id).unwrap_or([0.0; 3]).map(|v| v as f64));
    }
    (0..basis[0].pixels().len())
        .map(|i| {
            let mut acc = [0.0; 3];
            for (img, c) in basis.iter().zip(&coeff) {
                for k in 0..3 {
                    acc[k] += e * c[k] * img.pixels()[i][k] as f64;
                }
            }
            acc
        })
        .collect()
}

fn worst_relative(img: &HdrImage, want: &[[f64; 3]]) -> f64 {
    img.pixels()
        .iter()
        .zip(want)
        .flat_map(|(p, q)| (0..3).map(move |k| (p[k] as f64 - q[k]).abs() / q[k].abs().max(1.0)))
        .fold(0.0, f64::max)
}

#[test]
fn combined_render_equals_weighted_basis() {
    let opts = RenderOptions {
        spp: 2,
        seed: 5,
        indirect: false,
        area_samples: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in [0, 4] {
        let scene = generate_scene(seed);
        let cam = rig_camera(&scene, 32, 3, 8);
        let basis = scene.render_basis(&cam, &opts);
        assert_eq!(basis.len(), scene.num_lights() + 1);
        for _ in 0..5 {
            let mut spec = sample_lighting(scene.num_lights(), &LightSamplingPolicy::default(), &mut rng).unwrap().spec;
            spec.exposure = 1.7;
            let combined = scene.render_combined(&cam, &spec, &opts).unwrap();
            let err = worst_relative(&combined, &weighted_sum(&basis, &spec));
            assert!(err <= 1e-5, "scene {seed}: {err}");
        }
    }
}

#[test]
fn indirect_render_stays_linear() {
    let opts = RenderOptions {
        spp: 4,
        seed: 2,
        indirect: true,
        area_samples: 2,
    };
    let scene = generate_scene(1);
    let cam = rig_camera(&scene, 16, 0, 4);
    let basis = scene.render_basis(&cam, &opts);
    let spec = LightingSpec::all_on(scene.num_lights(), 0.6, 1.0).with_light(1, Some([0.9, 0.3, 0.1]));
    let (combined, se) = scene.render_combined_with_error(&cam, &spec, &opts).unwrap();
    let want = weighted_sum(&basis, &spec);
    assert!(worst_relative(&combined, &want) <= 1e-5);
    assert!(se.pixels().iter().all(|p| p.iter().all(|v| v.is_finite() && *v >= 0.0)));
    // individual OLAT renders agree with the one-pass basis
    for l in 0..=scene.num_lights() {
        let single = scene.render_olat(&cam, l, &opts).unwrap();
        let diff = single
            .pixels()
            .iter()
            .zip(basis[l].pixels())
            .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs() / b[k].abs().max(1.0)))
            .fold(0.0f32, f32::max);
        assert!(diff <= 1e-5, "source {l}: {diff}");
    }
}

#[test]
fn renders_are_deterministic_and_nonnegative() {
    let scene = generate_scene(2);
    let cam = rig_camera(&scene, 16, 1, 4);
    let opts = RenderOptions::default();
    let a = scene.render_basis(&cam, &opts);
    let b = scene.render_basis(&cam, &opts);
    assert_eq!(a, b);
    assert!(a.iter().all(|img| img.pixels().iter().all(|p| p.iter().all(|v| v.is_finite() && *v >= 0.0))));
}

/// A bare room with one ceiling panel and a camera looking straight up.
fn panel_room() -> (SceneDesc, Camera, Vec3, [f64; 2]) {
    let mut scene = generate_scene(0);
    scene.objects.clear();
    let top = scene.room.max.z - 0.001;
    let c = scene.room.center();
    let center = Vec3::new(c.x + 0.3, c.y - 0.2, top);
    let (hu, hv) = (0.5, 0.35);
    scene.lights = vec![LightDesc {
        id: 1,
        kind: LightKind::Rect {
            center,
            half_u: Vec3::new(hu, 0.0, 0.0),
            half_v: Vec3::new(0.0, -hv, 0.0),
            albedo: [0.8; 3],
        },
        intensity: 3.0,
    }];
    scene.validate().unwrap();
    let pose = CameraPose::looking(Vec3::new(c.x, c.y, 1.2), Vec3::UP, Vec3::new(1.0, 0.0, 0.0)).unwrap();
    let cam = Camera {
        intrinsics: FisheyeIntrinsics::full_circle(48, 48, 180.0).unwrap(),
        pose,
    };
    (scene, cam, center, [hu, hv])
}

#[test]
fn panel_mask_is_its_projected_rectangle() {
    let (scene, cam, center, [hu, hv]) = panel_room();
    let mask = scene.render_light_visibility(&cam, 1, DEFAULT_SPLAT_RADIUS).unwrap();
    let mut expected = 0;
    for y in 0..48 {
        for x in 0..48 {
            let inside = match cam.ray([x as f64 + 0.5, y as f64 + 0.5]) {
                Ok(ray) if ray.dir.z > 0.0 => {
                    let t = (center.z - ray.origin.z) / ray.dir.z;
                    let p = ray.at(t);
                    (p.x - center.x).abs() <= hu && (p.y - center.y).abs() <= hv
                }
                _ => false,
            };
            expected += usize::from(inside);
            assert_eq!(mask.get(x, y), inside, "pixel ({x}, {y})");
        }
    }
    assert!(expected > 50);
}

#[test]
fn light_masks_never_overlap() {
    for seed in 0..6 {
        let scene = generate_scene(seed);
        let rig =
            make_elliptical_rig(scene.default_rig_params(6), FisheyeIntrinsics::full_circle(32, 32, 180.0).unwrap()).unwrap();
        for cam in rig.cameras() {
            let masks: Vec<_> = (1..=scene.num_lights())
                .map(|l| scene.render_light_visibility(&cam, l, DEFAULT_SPLAT_RADIUS).unwrap())
                .collect();
            for i in 0..masks.len() {
                for j in i + 1..masks.len() {
                    assert!(!masks[i].intersects(&masks[j]), "scene {seed}: lights {} and {}", i + 1, j + 1);
                }
            }
        }
        assert!(scene.render_light_visibility(&rig.camera(0), 0, 2.0).is_err());
    }
}

#[test]
fn generated_scenes_are_valid_and_seeded() {
    for seed in 0..20 {
        let s = generate_scene(seed);
        s.validate().unwrap();
        assert!((2..=4).contains(&s.num_lights()));
        assert_eq!(s, generate_scene(seed));
        let json = serde_json::to_string(&s).unwrap();
        let back: SceneDesc = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
    assert_ne!(generate_scene(0), generate_scene(1));
}

#[test]
fn depth_is_finite_inside_the_room() {
    let scene = generate_scene(3);
    let cam = rig_camera(&scene, 24, 2, 5);
    let depth = scene.render_depth(&cam);
    let diag = scene.room.size().length();
    let mut finite = 0;
    for y in 0..24 {
        for x in 0..24 {
            let d = depth.get(x, y);
            if cam.intrinsics.pixel_center_inside(x, y) {
                // windows open onto the sky
                if d.is_finite() {
                    assert!(d > 0.0 && d <= diag);
                    finite += 1;
                }
            } else {
                assert!(d.is_infinite());
            }
        }
    }
    assert!(finite > 300);
}
