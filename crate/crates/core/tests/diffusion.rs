use forge_core::diffusion::{
    flow_loss, noise, noise_with, train_toy, velocity_target, AdamState, Objective, RelighterConfig, SamplerMode,
    TimeConvention, TimestepDistribution, TinyRelighter, ToyExample, TrainConfig,
};
use forge_core::rng::CounterRng;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn biased_sampler_puts_85_percent_below_040() {
    let d = TimestepDistribution::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 1_000_000;
    let low = (0..n).filter(|_| d.sample(&mut rng) <= 0.4).count();
    let f = low as f64 / n as f64;
    assert!((f - 0.85).abs() <= 0.002, "{f}");
}

#[test]
fn sampler_histogram_passes_chi_square() {
    let d = TimestepDistribution::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 200_000;
    let bins = 20;
    let mut counts = vec![0usize; bins];
    for _ in 0..n {
        let t = d.sample(&mut rng);
        assert!((0.0..=1.0).contains(&t));
        counts[((t * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let stat: f64 = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let lo = i as f64 / bins as f64;
            let hi = (i + 1) as f64 / bins as f64;
            let expected = n as f64 * (d.cdf(hi) - d.cdf(lo));
            (c as f64 - expected).powi(2) / expected
        })
        .sum();
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.001, "chi2 {stat}, p {p}");
}

#[test]
fn sampler_density_integrates_to_one() {
    for (tau, rho) in [(0.4, 0.85), (0.5, 0.5), (0.1, 0.3)] {
        let d = TimestepDistribution::new(tau, rho).unwrap();
        let m = 100_000;
        let integral: f64 = (0..m).map(|i| d.pdf((i as f64 + 0.5) / m as f64).unwrap()).sum::<f64>() / m as f64;
        assert!((integral - 1.0).abs() < 1e-3);
        assert!((d.cdf(tau) - rho).abs() < 1e-12);
        assert_eq!(d.cdf(1.0), 1.0);
    }
    assert!(TimestepDistribution::new(0.0, 0.5).is_err());
    assert!(TimestepDistribution::new(0.4, 1.5).is_err());
    assert!(TimestepDistribution::default().pdf(1.5).is_err());
}

#[test]
fn noising_conventions() {
    let x = [0.2, -0.4, 1.0];
    let e = [1.5, 0.3, -0.7];
    assert_eq!(noise(&x, &e, 0.0).unwrap(), e.to_vec());
    assert_eq!(noise(&x, &e, 1.0).unwrap(), x.to_vec());
    assert_eq!(noise_with(&x, &e, 0.0, TimeConvention::NoiseAtOne).unwrap(), x.to_vec());
    // the velocity target is the time derivative of the path
    let h = 1e-6;
    let up = noise(&x, &e, 0.3 + h).unwrap();
    let dn = noise(&x, &e, 0.3 - h).unwrap();
    let v = velocity_target(&x, &e).unwrap();
    for k in 0..3 {
        assert!(((up[k] - dn[k]) / (2.0 * h) - v[k]).abs() < 1e-8);
    }
    assert!(noise(&x, &e, 1.2).is_err());
    assert!(noise(&x, &e[..2], 0.5).is_err());
}

#[test]
fn adam_first_steps_match_hand_computation() {
    let mut adam = AdamState::new(2);
    let mut p = vec![1.0, -2.0];
    adam.step(&mut p, &[0.5, -3.0], 0.1).unwrap();
    // bias-corrected first step moves each parameter by lr * sign(g)
    assert!((p[0] - 0.9).abs() < 1e-7 && (p[1] + 1.9).abs() < 1e-7);
    let before = p[1];
    adam.step(&mut p, &[0.5, 1.0], 0.1).unwrap();
    let m1 = (0.9 * 0.1 * -3.0 + 0.1 * 1.0) / (1.0 - 0.81);
    let v1 = (0.999 * 0.001 * 9.0 + 0.001 * 1.0) / (1.0 - 0.998001);
    let want = before - 0.1 * m1 / (f64::sqrt(v1) + 1e-8);
    assert!((p[1] - want).abs() < 1e-12, "{} vs {want}", p[1]);
    assert!(adam.step(&mut p, &[f64::NAN, 0.0], 0.1).is_err());
    assert!(adam.step(&mut p, &[0.0], 0.1).is_err());
}

fn toy(seed: u64, w: usize, h: usize) -> ToyExample {
    let mut rng = CounterRng::new(&[seed, 3]);
    let mut px = || [0, 1, 2].map(|_| rng.uniform() as f32);
    ToyExample {
        width: w,
        height: h,
        input: (0..w * h).map(|_| px()).collect(),
        condition: (0..w * h).map(|_| px()).collect(),
        sun: 0.4,
        exposure: 1.5,
        target: (0..w * h).map(|_| px()).collect(),
    }
}

#[test]
fn relighter_input_layout() {
    let cfg = RelighterConfig::default();
    assert_eq!(cfg.input_dim(), 27);
    let model = TinyRelighter::new(cfg, 1);
    assert_eq!(model.params.len(), cfg.num_params());
    let ex = toy(0, 4, 3);
    let f = model.features(&ex, 5, [0.1, 0.2, 0.3], 0.7);
    assert_eq!(f.len(), 27);
    assert_eq!(&f[..3], &[0.1, 0.2, 0.3]);
    assert_eq!(f[3], ex.input[5][0] as f64);
    // pixel (1, 1) of a 4x3 frame
    assert!((f[9] - (2.0 * 1.5 / 4.0 - 1.0)).abs() < 1e-15);
    assert!((f[10] - (2.0 * 1.5 / 3.0 - 1.0)).abs() < 1e-15);
    let ckpt = model.to_checkpoint();
    assert_eq!(TinyRelighter::from_checkpoint(cfg, &ckpt).unwrap(), model);
    let other = RelighterConfig { hidden: 8, ..cfg };
    assert!(TinyRelighter::from_checkpoint(other, &ckpt).is_err());
}

#[test]
fn relighter_gradient_matches_finite_differences() {
    let cfg = RelighterConfig {
        hidden: 12,
        ..RelighterConfig::default()
    };
    let ex = toy(4, 5, 4);
    let pixels = [0, 3, 7, 19, 12];
    let mut rng = CounterRng::new(&[99]);
    let eps: Vec<[f64; 3]> = pixels.iter().map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
    for objective in [Objective::Velocity, Objective::NoisedLatent] {
        let mut model = TinyRelighter::new(cfg, 2);
        let (_, grad) = flow_loss(&model, &ex, &pixels, 0.35, &eps, objective).unwrap();
        let h = 1e-6;
        let mut pick = CounterRng::new(&[5]);
        for _ in 0..60 {
            let i = pick.below(model.params.len());
            let orig = model.params[i];
            model.params[i] = orig + h;
            let up = flow_loss(&model, &ex, &pixels, 0.35, &eps, objective).unwrap().0;
            model.params[i] = orig - h;
            let dn = flow_loss(&model, &ex, &pixels, 0.35, &eps, objective).unwrap().0;
            model.params[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / grad[i].abs().max(1e-3);
            assert!(rel <= 1e-4, "param {i}: {fd} vs {}", grad[i]);
        }
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let data: Vec<ToyExample> = (0..4).map(|s| toy(s, 6, 6)).collect();
    let cfg = TrainConfig {
        steps: 300,
        lr: 3e-3,
        val_every: 100,
        model: RelighterConfig {
            hidden: 16,
            ..RelighterConfig::default()
        },
        ..TrainConfig::default()
    };
    let (m1, c1) = train_toy(&data, SamplerMode::Biased, 3, &cfg).unwrap();
    let (m2, c2) = train_toy(&data, SamplerMode::Biased, 3, &cfg).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(c1, c2);
    assert!(c1.all_finite());
    assert_eq!(c1.train.len(), 300);
    assert_eq!(c1.val.iter().map(|p| p.step).collect::<Vec<_>>(), vec![0, 100, 200, 300]);
    assert!(c1.val.last().unwrap().loss < c1.val[0].loss);
    let (_, c3) = train_toy(&data, SamplerMode::Uniform, 3, &cfg).unwrap();
    assert_ne!(c1.train, c3.train);
    assert!(train_toy(&[], SamplerMode::Biased, 0, &cfg).is_err());
}

proptest! {
    #[test]
    fn sampler_cdf_is_monotone(tau in 0.05f64..0.95, rho in 0.0f64..1.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let d = TimestepDistribution::new(tau, rho).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(d.cdf(lo) <= d.cdf(hi) + 1e-15);
        prop_assert!(d.pdf(lo).unwrap() >= 0.0);
    }
}
