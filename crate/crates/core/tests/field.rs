use forge_core::camera::{make_elliptical_rig, EllipseParams, FisheyeIntrinsics, Ray};
use forge_core::field::{
    collect_rays, distill, distill_rays, loss_and_grad, DistillConfig, RenderConfig, TrainRay, VoxelField,
};
use forge_core::hdr::LdrImage;
use forge_core::math::Vec3;
use forge_core::rng::CounterRng;
use proptest::prelude::*;

fn random_field(n: usize, seed: u64, scale: f64) -> VoxelField {
    let mut f = VoxelField::new(n, Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0), 0.0, [0.0; 3], [0.9, 0.8, 0.7]).unwrap();
    let mut rng = CounterRng::new(&[seed]);
    f.fill(|_| [0, 1, 2, 3].map(|_| rng.normal() * scale));
    f
}

fn random_rays(n: usize, seed: u64) -> Vec<Ray> {
    let mut rng = CounterRng::new(&[seed, 2]);
    (0..n)
        .map(|_| {
            let target = Vec3::new(rng.uniform(), rng.uniform(), rng.uniform());
            let origin = Vec3::new(-0.6 + 0.2 * rng.uniform(), 0.5 + rng.normal() * 0.3, 0.5 + rng.normal() * 0.3);
            Ray {
                origin,
                dir: (target - origin).normalized(),
            }
        })
        .collect()
}

fn teacher_rays(teacher: &VoxelField, rays: &[Ray], cfg: &RenderConfig) -> Vec<TrainRay> {
    rays.iter()
        .enumerate()
        .map(|(i, &ray)| TrainRay {
            ray,
            target: teacher.render_ray(&ray, cfg, i as u64),
            key: i as u64,
        })
        .collect()
}

#[test]
fn field_gradient_matches_finite_differences() {
    let cfg = RenderConfig {
        samples: 24,
        min_transmittance: 0.0,
        ..RenderConfig::default()
    };
    let teacher = random_field(5, 1, 0.1);
    let mut student = random_field(5, 2, 0.1);
    let batch = teacher_rays(&teacher, &random_rays(32, 7), &cfg);
    let mut grad = vec![0.0; student.params().len()];
    loss_and_grad(&student, &batch, &cfg, &mut grad);

    let mut scratch = vec![0.0; grad.len()];
    let mut loss = |f: &VoxelField| loss_and_grad(f, &batch, &cfg, &mut scratch);
    // parameters the batch actually touches
    let mut touched: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-6).collect();
    assert!(touched.len() > 50);
    let mut rng = CounterRng::new(&[3]);
    let n = touched.len();
    for k in 0..n {
        touched.swap(k, k + rng.below(n - k));
    }
    let h = 1e-6;
    for &i in touched.iter().take(50) {
        let orig = student.params()[i];
        student.params_mut()[i] = orig + h;
        let up = loss(&student);
        student.params_mut()[i] = orig - h;
        let dn = loss(&student);
        student.params_mut()[i] = orig;
        let fd = (up - dn) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / grad[i].abs().max(1e-4);
        assert!(rel <= 1e-3, "param {i}: {fd} vs {}", grad[i]);
    }
}

#[test]
fn distilling_a_field_onto_itself_leaves_it_unchanged() {
    let render = RenderConfig {
        samples: 32,
        ..RenderConfig::default()
    };
    let field = random_field(6, 4, 0.2);
    let rays = teacher_rays(&field, &random_rays(200, 1), &render);
    let mut copy = field.clone();
    let log = distill_rays(
        &mut copy,
        &rays,
        &DistillConfig {
            iters: 50,
            lr: 1e-2,
            rays_per_iter: 64,
            seed: 0,
            render,
        },
    )
    .unwrap();
    assert!(log.loss.iter().all(|&l| l < 1e-20));
    let drift = copy.params().iter().zip(field.params()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(drift <= 1e-6, "{drift}");
}

#[test]
fn distillation_loss_goes_down() {
    let render = RenderConfig {
        samples: 32,
        ..RenderConfig::default()
    };
    let teacher = random_field(6, 8, 0.3);
    let rays = teacher_rays(&teacher, &random_rays(2000, 5), &render);
    let mut student = VoxelField::new(6, Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0), -0.2, [0.0; 3], [0.9, 0.8, 0.7]).unwrap();
    let cfg = DistillConfig {
        iters: 400,
        lr: 1e-2,
        rays_per_iter: 128,
        seed: 1,
        render,
    };
    let log = distill_rays(&mut student, &rays, &cfg).unwrap();
    let blocks: Vec<f64> = log.loss.chunks(80).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in blocks.windows(2) {
        assert!(w[1] <= w[0] * 1.02, "{blocks:?}");
    }
    assert!(blocks[4] < 0.25 * blocks[0], "{blocks:?}");

    let mut again = VoxelField::new(6, Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0), -0.2, [0.0; 3], [0.9, 0.8, 0.7]).unwrap();
    assert_eq!(distill_rays(&mut again, &rays, &cfg).unwrap(), log);
    assert_eq!(again, student);
}

#[test]
fn views_and_rays_cover_the_image_circle() {
    let k = FisheyeIntrinsics::full_circle(16, 16, 180.0).unwrap();
    let rig = make_elliptical_rig(EllipseParams::new(Vec3::new(0.5, 0.5, 0.0), 0.1, 0.1, 0.5, 3), k).unwrap();
    let field = random_field(4, 9, 0.5);
    let cfg = RenderConfig {
        samples: 16,
        jitter: false,
        ..RenderConfig::default()
    };
    let cams: Vec<_> = rig.cameras().collect();
    let views: Vec<LdrImage> = cams.iter().map(|c| field.render_view(c, &cfg).unwrap()).collect();
    let inside = (0..16).flat_map(|y| (0..16).map(move |x| (x, y))).filter(|&(x, y)| k.pixel_center_inside(x, y)).count();
    for v in &views {
        for y in 0..16 {
            for x in 0..16 {
                if !k.pixel_center_inside(x, y) {
                    assert_eq!(v.get(x, y), [0.0; 3]);
                }
            }
        }
    }
    let rays = collect_rays(&views, &cams).unwrap();
    assert_eq!(rays.len(), 3 * inside);
    assert!(collect_rays(&views[..2], &cams).is_err());

    // unjittered views of the field reproduce themselves
    let mut copy = field.clone();
    let log = distill(
        &mut copy,
        &views,
        &cams,
        &DistillConfig {
            iters: 1,
            rays_per_iter: 256,
            render: cfg,
            ..DistillConfig::default()
        },
    )
    .unwrap();
    assert!(log.loss[0] < 1e-12, "{}", log.loss[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_roundtrip(seed in any::<u64>(), n in 2usize..6, gain in 0.5f64..20.0) {
        let f = random_field(n, seed, 1.0).with_gain(gain).unwrap();
        prop_assert_eq!(VoxelField::from_checkpoint(&f.to_checkpoint()).unwrap(), f);
    }

    #[test]
    fn rendered_colors_stay_in_the_unit_cube(seed in any::<u64>()) {
        let f = random_field(4, seed, 2.0);
        let cfg = RenderConfig { samples: 16, ..RenderConfig::default() };
        for (i, ray) in random_rays(8, seed).iter().enumerate() {
            let c = f.render_ray(ray, &cfg, i as u64);
            prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
