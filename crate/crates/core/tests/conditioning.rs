use std::collections::BTreeMap;

use forge_core::camera::{make_elliptical_rig, Camera, CameraPose, FisheyeIntrinsics};
use forge_core::conditioning::{
    backproject_annotations, build_condition_video, fourier_features, fourier_features_grad, pack_channelwise, pack_temporal,
    render_annotation_masks, rope_apply, unpack_temporal, ConditionError, ConditionVideo, RopeConfig, Stream, SunMlp,
    TokenGrid, SENTINEL,
};
use forge_core::mask::Mask;
use forge_core::math::Vec3;
use forge_core::rng::CounterRng;
use forge_core::scene::{generate_scene, SceneObject, Shape, DEFAULT_SPLAT_RADIUS};
use proptest::prelude::*;

#[test]
fn condition_video_paints_visible_pixels_only() {
    let scene = generate_scene(0);
    let rig = make_elliptical_rig(scene.default_rig_params(6), FisheyeIntrinsics::full_circle(32, 32, 180.0).unwrap()).unwrap();
    let masks: BTreeMap<u32, Vec<Mask>> = (1..=scene.num_lights() as u32)
        .map(|id| {
            let m = rig.cameras().map(|c| scene.render_light_visibility(&c, id as usize, DEFAULT_SPLAT_RADIUS).unwrap()).collect();
            (id, m)
        })
        .collect();
    let color = [0.9, 0.4, 0.1];
    let edits = BTreeMap::from([(1u32, color)]);
    let video = build_condition_video(&masks, &edits, 6, 32, 32).unwrap();
    video.validate().unwrap();
    let mut painted = 0;
    for t in 0..6 {
        for y in 0..32 {
            for x in 0..32 {
                let want = if masks[&1][t].get(x, y) { color } else { SENTINEL };
                assert_eq!(video.get(t, x, y), want);
            }
        }
        painted += video.edited_count(t);
    }
    assert_eq!(painted, masks[&1].iter().map(Mask::count).sum::<usize>());

    let untouched = build_condition_video(&masks, &BTreeMap::new(), 6, 32, 32).unwrap();
    assert!(untouched.is_all_sentinel());

    let frames: Vec<Vec<u8>> = (0..6).map(|t| video.frame_to_pfm(t)).collect();
    assert_eq!(ConditionVideo::from_pfm_frames(&frames).unwrap(), video);
}

#[test]
fn condition_video_rejects_inconsistent_inputs() {
    let full = Mask::from_bits(2, 2, vec![true; 4]);
    let masks = BTreeMap::from([(1u32, vec![full.clone()]), (2u32, vec![full])]);
    let both = BTreeMap::from([(1u32, [1.0; 3]), (2u32, [0.5; 3])]);
    assert!(matches!(
        build_condition_video(&masks, &both, 1, 2, 2),
        Err(ConditionError::OverlappingMasks { .. })
    ));
    let missing = BTreeMap::from([(3u32, [1.0; 3])]);
    assert!(matches!(build_condition_video(&masks, &missing, 1, 2, 2), Err(ConditionError::MissingMask(3))));
    let negative = BTreeMap::from([(1u32, [1.0, -0.5, 0.0])]);
    assert!(build_condition_video(&masks, &negative, 1, 2, 2).is_err());
    assert!(build_condition_video(&masks, &BTreeMap::from([(1u32, [1.0; 3])]), 2, 2, 2).is_err());
    assert!(ConditionVideo::from_data(1, 1, 1, vec![[-1.0, 0.0, 0.0]]).is_err());
    assert!(ConditionVideo::from_data(1, 1, 1, vec![SENTINEL]).is_ok());
}

fn looking_x(position: Vec3) -> Camera {
    Camera {
        intrinsics: FisheyeIntrinsics::full_circle(48, 48, 180.0).unwrap(),
        pose: CameraPose::looking(position, Vec3::new(1.0, 0.0, 0.0), Vec3::UP).unwrap(),
    }
}

#[test]
fn annotations_are_hidden_behind_occluders() {
    let mut scene = generate_scene(0);
    scene.objects.clear();
    let c = scene.room.center();
    let wall = Vec3::new(scene.room.max.x, c.y, 1.0);
    let a = looking_x(Vec3::new(c.x, c.y, 1.0));
    let b = looking_x(Vec3::new(c.x, c.y + 0.5, 1.0));

    let px = a.project(wall).unwrap();
    let pixel = [px[0].floor() as usize, px[1].floor() as usize];
    let points = backproject_annotations(&[pixel], &scene.render_depth(&a), &a).unwrap();
    assert!((points[0].x - scene.room.max.x).abs() < 1e-6);

    let views = |s: &forge_core::scene::SceneDesc| vec![(a, s.render_depth(&a)), (b, s.render_depth(&b))];
    let open = render_annotation_masks(&points, &views(&scene), 2.0);
    assert!(open[0].get(pixel[0], pixel[1]));
    assert!(!open[1].is_empty());

    // a small box on the segment from b to the point
    let mid = (b.pose.position + points[0]) * 0.5;
    scene.objects.push(SceneObject {
        shape: Shape::Box {
            min: mid - Vec3::splat(0.06),
            max: mid + Vec3::splat(0.06),
        },
        albedo: [0.5; 3],
    });
    let blocked = render_annotation_masks(&points, &views(&scene), 2.0);
    assert_eq!(blocked[0], open[0]);
    assert!(blocked[1].is_empty());

    let sky = [0usize, 0];
    assert!(backproject_annotations(&[sky], &scene.render_depth(&a), &a).is_err());
    assert!(backproject_annotations(&[[48, 0]], &scene.render_depth(&a), &a).is_err());
}

#[test]
fn fourier_gradient_matches_finite_differences() {
    let h = 1e-6;
    for s in [0.0, 0.13, 0.5, 0.97] {
        let g = fourier_features_grad(s, 6);
        let up = fourier_features(s + h, 6);
        let dn = fourier_features(s - h, 6);
        for i in 0..12 {
            let fd = (up[i] - dn[i]) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "band {i} at {s}");
        }
    }
}

#[test]
fn sun_embedding_gradient_matches_finite_differences() {
    let h = 1e-6;
    for seed in 0..5 {
        let mlp = SunMlp::random(4, 16, seed);
        for s in [0.05, 0.3, 0.62, 0.99] {
            let (e, g) = mlp.embed_with_grad(s).unwrap();
            assert_eq!(e, mlp.embed(s).unwrap());
            let up = mlp.embed(s + h).unwrap();
            let dn = mlp.embed(s - h).unwrap();
            for i in 0..16 {
                let fd = (up[i] - dn[i]) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "seed {seed}, s {s}, dim {i}: {fd} vs {}", g[i]);
            }
        }
    }
    assert!(SunMlp::zeros(4, 8).embed(0.5).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn rope_config_splits_evenly() {
    let c = RopeConfig::for_dim(48).unwrap();
    assert_eq!(c.axis_dims, [16, 16, 16]);
    let c = RopeConfig::for_dim(20).unwrap();
    assert_eq!(c.dim(), 20);
    assert!(c.axis_dims.iter().all(|d| d % 2 == 0));
    assert!(RopeConfig::for_dim(7).is_err());
    assert!(rope_apply(&[1.0; 6], [0; 3], &RopeConfig::for_dim(8).unwrap()).is_err());
}

fn grid(seed: u64, t: usize, h: usize, w: usize, dim: usize) -> TokenGrid {
    let mut rng = CounterRng::new(&[seed]);
    TokenGrid::new(t, h, w, dim, (0..t * h * w * dim).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn temporal_packing_roundtrips() {
    let (a, b, c) = (grid(1, 3, 2, 4, 6), grid(2, 3, 2, 4, 6), grid(3, 3, 2, 4, 6));
    let tokens = pack_temporal(&a, &b, &c, None).unwrap();
    assert_eq!(tokens.len(), 3 * 3 * 2 * 4);
    for tok in &tokens {
        let k = tok.stream as i64;
        assert!((3 * k..3 * (k + 1)).contains(&tok.position[0]));
    }
    assert_eq!(tokens.iter().filter(|t| t.stream == Stream::Condition).count(), 24);
    let [x, y, z] = unpack_temporal(&tokens, 3, 2, 4).unwrap();
    assert_eq!((x, y, z), (a.clone(), b.clone(), c.clone()));

    let rope = RopeConfig::for_dim(6).unwrap();
    let rotated = pack_temporal(&a, &b, &c, Some(&rope)).unwrap();
    for (r, p) in rotated.iter().zip(&tokens) {
        let n0: f64 = p.features.iter().map(|v| v * v).sum();
        let n1: f64 = r.features.iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() <= 1e-12 * n0.max(1.0));
    }

    let wide = pack_channelwise(&a, &b, &c).unwrap();
    assert_eq!(wide.len(), 24);
    assert_eq!(wide[5].features.len(), 18);
    assert_eq!(&wide[5].features[6..12], b.token(0, 1, 1));

    let odd = grid(4, 2, 2, 4, 6);
    assert!(pack_temporal(&a, &odd, &c, None).is_err());
    assert!(unpack_temporal(&tokens[1..], 3, 2, 4).is_err());
}

#[test]
fn patchify_groups_pixels() {
    let frame: Vec<[f32; 3]> = (0..16).map(|i| [i as f32, 0.0, 0.0]).collect();
    let g = TokenGrid::patchify(&[frame], 4, 4, 2).unwrap();
    assert_eq!((g.frames, g.height, g.width, g.dim), (1, 2, 2, 12));
    let reds: Vec<f64> = g.token(0, 1, 0).chunks(3).map(|c| c[0]).collect();
    assert_eq!(reds, vec![8.0, 9.0, 12.0, 13.0]);
    assert!(TokenGrid::patchify(&[vec![[0.0; 3]; 9]], 3, 3, 2).is_err());
}

fn vec_of(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = CounterRng::new(&[seed, 77]);
    (0..n).map(|_| rng.normal()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rope_preserves_norms(seed in any::<u64>(), pairs in 3usize..40, p in prop::array::uniform3(-500i64..500)) {
        let v = vec_of(seed, 2 * pairs);
        let cfg = RopeConfig::for_dim(2 * pairs).unwrap();
        let r = rope_apply(&v, p, &cfg).unwrap();
        let (a, b) = (dot(&v, &v).sqrt(), dot(&r, &r).sqrt());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        prop_assert_eq!(rope_apply(&v, [0; 3], &cfg).unwrap(), v);
    }

    #[test]
    fn rope_scores_depend_on_offsets_only(
        seed in any::<u64>(),
        p in prop::array::uniform3(-300i64..300),
        q in prop::array::uniform3(-300i64..300),
        shift in prop::array::uniform3(-300i64..300),
    ) {
        let cfg = RopeConfig::for_dim(24).unwrap();
        let (a, b) = (vec_of(seed, 24), vec_of(seed ^ 1, 24));
        let s0 = dot(&rope_apply(&a, p, &cfg).unwrap(), &rope_apply(&b, q, &cfg).unwrap());
        let add = |x: [i64; 3]| [x[0] + shift[0], x[1] + shift[1], x[2] + shift[2]];
        let s1 = dot(&rope_apply(&a, add(p), &cfg).unwrap(), &rope_apply(&b, add(q), &cfg).unwrap());
        let scale = dot(&a, &a).sqrt() * dot(&b, &b).sqrt();
        prop_assert!((s0 - s1).abs() <= 1e-9 * scale, "{} vs {}", s0, s1);
    }
}
