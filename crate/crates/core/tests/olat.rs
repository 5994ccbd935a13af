use forge_core::hdr::HdrImage;
use forge_core::olat::{
    choose_exposure, composite, composite_hdr, sample_lighting, ColorBranch, LightBasis, LightSamplingPolicy, LightingSpec,
};
use forge_core::rng::CounterRng;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_basis(rng: &mut CounterRng, lights: usize, w: usize, h: usize) -> LightBasis {
    let images = (0..=lights)
        .map(|_| {
            let px = (0..w * h).map(|_| [0, 1, 2].map(|_| (rng.uniform() * 3.0) as f32)).collect();
            HdrImage::from_pixels(w, h, px).unwrap()
        })
        .collect();
    LightBasis::new(0, 0, images).unwrap()
}

fn random_spec(rng: &mut CounterRng, lights: usize) -> LightingSpec {
    let mut spec = LightingSpec {
        sun: if rng.uniform() < 0.5 { 0.0 } else { rng.uniform() as f32 },
        exposure: (0.1 + 4.0 * rng.uniform()) as f32,
        ..LightingSpec::default()
    };
    for id in 1..=lights as u32 {
        match rng.below(3) {
            0 => {}
            1 => {
                spec.lights.insert(id, None);
            }
            _ => {
                spec.lights.insert(id, Some([0, 1, 2].map(|_| rng.uniform() as f32)));
            }
        }
    }
    if !spec.any_on() {
        spec.sun = 0.5;
    }
    spec
}

/// Per-pixel brute force: `e * sum(c_l * I_l)` then the sRGB curve.
fn oracle(basis: &LightBasis, spec: &LightingSpec) -> Vec<[f32; 3]> {
    let (w, h) = basis.dims();
    let l = basis.num_interior();
    let mut coeff = vec![[spec.sun; 3]];
    for id in 1..=l as u32 {
        coeff.push(spec.lights.get(&id).copied().flatten().unwrap_or([0.0; 3]));
    }
    (0..w * h)
        .map(|i| {
            let mut out = [0.0f32; 3];
            for k in 0..3 {
                let mut sum = 0.0f64;
                for (img, c) in basis.images().iter().zip(&coeff) {
                    sum += c[k] as f64 * img.pixels()[i][k] as f64;
                }
                let radiance = (spec.exposure as f64 * sum) as f32 as f64;
                let encoded = if radiance <= 0.0031308 {
                    12.92 * radiance
                } else {
                    1.055 * radiance.powf(1.0 / 2.4) - 0.055
                };
                out[k] = encoded.clamp(0.0, 1.0) as f32;
            }
            out
        })
        .collect()
}

#[test]
fn composite_matches_brute_force_exactly() {
    let mut rng = CounterRng::new(&[42]);
    for trial in 0..1000 {
        let lights = 1 + trial % 4;
        let basis = random_basis(&mut rng, lights, 4, 4);
        let spec = random_spec(&mut rng, lights);
        let got = composite(&basis, &spec).unwrap();
        assert_eq!(got.pixels(), oracle(&basis, &spec).as_slice(), "trial {trial}: {spec:?}");
    }
}

#[test]
fn composite_of_all_off_is_black_and_bad_specs_fail() {
    let mut rng = CounterRng::new(&[1]);
    let basis = random_basis(&mut rng, 2, 3, 3);
    let off = LightingSpec::default().with_light(1, None);
    assert!(composite(&basis, &off).unwrap().pixels().iter().all(|p| *p == [0.0; 3]));
    assert!(off.validate_request().unwrap_err().to_string().contains("at least one light must be on"));
    let unknown = LightingSpec::all_on(2, 0.0, 1.0).with_light(3, Some([1.0; 3]));
    assert!(composite(&basis, &unknown).is_err());
    let negative = LightingSpec::all_on(1, 0.0, 1.0).with_light(2, Some([0.5, -0.1, 0.5]));
    assert!(composite(&basis, &negative).is_err());
}

#[test]
fn choose_exposure_maps_the_percentile_to_one() {
    // luminances 1..=100
    let px = (1..=100).map(|v| [v as f32; 3]).collect();
    let img = HdrImage::from_pixels(10, 10, px).unwrap();
    let e = choose_exposure(&img, 0.95).unwrap();
    assert!((e as f64 - 1.0 / 95.0).abs() < 1e-7);
    assert!((choose_exposure(&img, 1.0).unwrap() as f64 - 0.01).abs() < 1e-8);
    assert!(choose_exposure(&HdrImage::zeros(2, 2), 0.5).is_err());
    assert!(choose_exposure(&img, 0.0).is_err());
    let tiny = HdrImage::from_pixels(1, 1, vec![[1e-9; 3]]).unwrap();
    assert_eq!(choose_exposure(&tiny, 0.5).unwrap(), 1e3);
}

#[test]
fn sampled_lighting_rates_match_enumeration() {
    // 3 interior lights plus the exterior: 16 patterns, the all-off one
    // rejected, so each source is on in 8 of the 15 accepted patterns.
    let n = 200_000;
    let policy = LightSamplingPolicy {
        p_blackbody: 0.0,
        ..LightSamplingPolicy::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut on = [0usize; 4];
    for _ in 0..n {
        let s = sample_lighting(3, &policy, &mut rng).unwrap().spec;
        assert!(s.any_on());
        assert_eq!(s.exposure, 1.0);
        assert!((0.0..=1.0).contains(&s.sun));
        on[0] += usize::from(s.sun > 0.0);
        for id in 1..=3u32 {
            on[id as usize] += usize::from(s.color(id).is_some());
        }
    }
    for (source, count) in on.iter().enumerate() {
        let rate = *count as f64 / n as f64;
        assert!((rate - 8.0 / 15.0).abs() < 0.005, "source {source}: {rate}");
    }
}

#[test]
fn blackbody_branch_frequency() {
    let n = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bb = (0..n)
        .filter(|_| sample_lighting(0, &LightSamplingPolicy::default(), &mut rng).unwrap().branch == ColorBranch::Blackbody)
        .count();
    let f = bb as f64 / n as f64;
    assert!((f - 0.8).abs() < 0.005, "{f}");
}

#[test]
fn sampled_colors_follow_their_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2000 {
        let s = sample_lighting(3, &LightSamplingPolicy::default(), &mut rng).unwrap();
        for c in s.spec.lights.values().flatten() {
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
            if s.branch == ColorBranch::Blackbody {
                assert_eq!(c.iter().cloned().fold(0.0f32, f32::max), 1.0);
            }
        }
    }
}

#[test]
fn interior_only_policy_never_touches_the_sun() {
    let policy = LightSamplingPolicy {
        include_exterior: false,
        ..LightSamplingPolicy::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let s = sample_lighting(2, &policy, &mut rng).unwrap().spec;
        assert_eq!(s.sun, 0.0);
        assert!(s.lights.values().flatten().count() >= 1);
    }
    assert!(sample_lighting(0, &policy, &mut rng).is_err());
}

proptest! {
    #[test]
    fn composite_is_linear_in_the_coefficients(seed in any::<u64>(), a in 0.0f32..2.0) {
        let mut rng = CounterRng::new(&[seed]);
        let basis = random_basis(&mut rng, 2, 3, 3);
        let s1 = LightingSpec::default().with_light(1, Some([1.0, 0.5, 0.25]));
        let s2 = LightingSpec { sun: 0.7, ..LightingSpec::default() };
        let mut both = s1.clone();
        both.sun = s2.sun;
        let x = composite_hdr(&basis, &s1).unwrap();
        let y = composite_hdr(&basis, &s2).unwrap();
        let xy = composite_hdr(&basis, &both).unwrap();
        let mut scaled = both.clone();
        scaled.exposure = a.max(0.01);
        let z = composite_hdr(&basis, &scaled).unwrap();
        for i in 0..9 {
            for k in 0..3 {
                let sum = x.pixels()[i][k] + y.pixels()[i][k];
                prop_assert!((xy.pixels()[i][k] - sum).abs() <= 1e-6 * sum.abs().max(1.0));
                let want = scaled.exposure * xy.pixels()[i][k];
                prop_assert!((z.pixels()[i][k] - want).abs() <= 1e-5 * want.abs().max(1.0));
            }
        }
    }
}
