//! Flow-matching training machinery at toy scale.
//!
//! Timestep convention: `t = 0` is pure noise and `t = 1` is clean data,
//! `z_t = t x + (1 - t) eps`, velocity `v = x - eps`. The biased sampler
//! therefore puts mass `rho` on the noisiest fraction `[0, tau]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::fourier_features;
use crate::hdr::Rgb;
use crate::rng::{hash_key, CounterRng};

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid timestep distribution: {0}")]
    InvalidDistribution(String),
    #[error("timestep {0} outside [0, 1]")]
    TimestepOutOfRange(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: &'static str },
    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Piecewise-uniform timestep density: mass `rho` on `[0, tau]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepDistribution {
    pub tau: f64,
    pub rho: f64,
}

impl Default for TimestepDistribution {
    fn default() -> Self {
        Self { tau: 0.4, rho: 0.85 }
    }
}

impl TimestepDistribution {
    pub fn new(tau: f64, rho: f64) -> Result<Self, DiffusionError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(DiffusionError::InvalidDistribution(format!("tau {tau} not in (0, 1)")));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(DiffusionError::InvalidDistribution(format!("rho {rho} not in [0, 1]")));
        }
        Ok(Self { tau, rho })
    }

    /// Uniform on `[0, 1]`, i.e. `rho = tau`.
    pub fn uniform() -> Self {
        Self { tau: 0.5, rho: 0.5 }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let branch: f64 = rng.gen();
        let u: f64 = rng.gen();
        if branch < self.rho {
            u * self.tau
        } else {
            // (tau, 1]
            1.0 - u * (1.0 - self.tau)
        }
    }

    pub fn pdf(&self, t: f64) -> Result<f64, DiffusionError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(DiffusionError::TimestepOutOfRange(t));
        }
        Ok(if t <= self.tau {
            self.rho / self.tau
        } else {
            (1.0 - self.rho) / (1.0 - self.tau)
        })
    }

    pub fn cdf(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        if t <= self.tau {
            self.rho * t / self.tau
        } else {
            self.rho + (1.0 - self.rho) * (t - self.tau) / (1.0 - self.tau)
        }
    }
}

/// Which end of `[0, 1]` is pure noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeConvention {
    #[default]
    NoiseAtZero,
    NoiseAtOne,
}

impl TimeConvention {
    /// Weight on the clean sample at time `t`.
    fn clean_weight(self, t: f64) -> f64 {
        match self {
            TimeConvention::NoiseAtZero => t,
            TimeConvention::NoiseAtOne => 1.0 - t,
        }
    }
}

fn check_t(t: f64) -> Result<(), DiffusionError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(DiffusionError::TimestepOutOfRange(t))
    }
}

pub fn noise(clean: &[f64], gaussian: &[f64], t: f64) -> Result<Vec<f64>, DiffusionError> {
    noise_with(clean, gaussian, t, TimeConvention::NoiseAtZero)
}

pub fn noise_with(clean: &[f64], gaussian: &[f64], t: f64, conv: TimeConvention) -> Result<Vec<f64>, DiffusionError> {
    check_t(t)?;
    if clean.len() != gaussian.len() {
        return Err(DiffusionError::Shape(format!("clean {} vs noise {}", clean.len(), gaussian.len())));
    }
    let a = conv.clean_weight(t);
    Ok(clean.iter().zip(gaussian).map(|(x, e)| a * x + (1.0 - a) * e).collect())
}

/// `v = clean - gaussian` (the time derivative of `z_t` under the default convention).
pub fn velocity_target(clean: &[f64], gaussian: &[f64]) -> Result<Vec<f64>, DiffusionError> {
    if clean.len() != gaussian.len() {
        return Err(DiffusionError::Shape(format!("clean {} vs noise {}", clean.len(), gaussian.len())));
    }
    Ok(clean.iter().zip(gaussian).map(|(x, e)| x - e).collect())
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), DiffusionError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DiffusionError::Shape(format!(
                "adam state {} vs params {} vs grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(DiffusionError::NonFiniteGradient(i));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Regress `v = x - eps`.
    #[default]
    Velocity,
    /// Regress the noised sample `z_t` itself (degenerate; kept for comparison).
    NoisedLatent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelighterConfig {
    pub hidden: usize,
    /// Fourier bands for the timestep embedding.
    pub time_bands: usize,
    /// Fourier bands for the sun intensity embedding.
    pub sun_bands: usize,
    /// Experimental: also condition on a Fourier-lifted exposure scalar.
    pub exposure_bands: usize,
}

impl Default for RelighterConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            time_bands: 4,
            sun_bands: 4,
            exposure_bands: 0,
        }
    }
}

impl RelighterConfig {
    pub fn input_dim(&self) -> usize {
        3 + 3 + 3 + 2 + 2 * self.time_bands + 2 * self.sun_bands + 2 * self.exposure_bands
    }

    pub fn num_params(&self) -> usize {
        let (i, h) = (self.input_dim(), self.hidden);
        h * i + h + h * h + h + 3 * h + 3
    }

    pub fn architecture_hash(&self) -> u64 {
        hash_key(&[
            0x7E1A_11,
            self.input_dim() as u64,
            self.hidden as u64,
            self.time_bands as u64,
            self.sun_bands as u64,
            self.exposure_bands as u64,
        ])
    }
}

/// Per-pixel tanh MLP `in -> hidden -> hidden -> 3` predicting velocity.
///
/// Parameters are one flat vector: `W1 (hidden x in), b1, W2 (hidden x
/// hidden), b2, W3 (3 x hidden), b3`, all row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyRelighter {
    pub config: RelighterConfig,
    pub params: Vec<f64>,
}

/// One training example: a frame under input lighting, its condition
/// frame, the sun intensity and the target (relit) frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyExample {
    pub width: usize,
    pub height: usize,
    pub input: Vec<Rgb>,
    pub condition: Vec<Rgb>,
    pub sun: f64,
    pub exposure: f64,
    pub target: Vec<Rgb>,
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

impl TinyRelighter {
    pub fn new(config: RelighterConfig, seed: u64) -> Self {
        let mut rng = CounterRng::new(&[seed, 0x12E1]);
        let mut params = vec![0.0; config.num_params()];
        let o = Self::offsets(&config);
        let (i, h) = (config.input_dim(), config.hidden);
        let s1 = (1.0 / i as f64).sqrt();
        let s2 = (1.0 / h as f64).sqrt();
        params[o.w1..o.b1].iter_mut().for_each(|p| *p = rng.normal() * s1);
        params[o.w2..o.b2].iter_mut().for_each(|p| *p = rng.normal() * s2);
        params[o.w3..o.b3].iter_mut().for_each(|p| *p = rng.normal() * s2);
        Self { config, params }
    }

    fn offsets(c: &RelighterConfig) -> Offsets {
        let (i, h) = (c.input_dim(), c.hidden);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + 3 * h;
        Offsets { w1, b1, w2, b2, w3, b3 }
    }

    /// Feature vector for pixel `idx` of `ex` with noised target `z`.
    pub fn features(&self, ex: &ToyExample, idx: usize, z: [f64; 3], t: f64) -> Vec<f64> {
        let c = &self.config;
        let mut f = Vec::with_capacity(c.input_dim());
        f.extend_from_slice(&z);
        f.extend(ex.input[idx].iter().map(|&v| v as f64));
        f.extend(ex.condition[idx].iter().map(|&v| v as f64));
        let x = (idx % ex.width) as f64 + 0.5;
        let y = (idx / ex.width) as f64 + 0.5;
        f.push(2.0 * x / ex.width as f64 - 1.0);
        f.push(2.0 * y / ex.height as f64 - 1.0);
        f.extend(fourier_features(t, c.time_bands));
        f.extend(fourier_features(ex.sun, c.sun_bands));
        if c.exposure_bands > 0 {
            f.extend(fourier_features(ex.exposure.ln(), c.exposure_bands));
        }
        f
    }

    fn layer(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
        let n = x.len();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &w[i * n..(i + 1) * n];
            *o = b[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<[f64; 3], DiffusionError> {
        Ok(self.forward_cached(x)?.2)
    }

    fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, [f64; 3]), DiffusionError> {
        let c = &self.config;
        if x.len() != c.input_dim() {
            return Err(DiffusionError::Shape(format!("input {} vs {}", x.len(), c.input_dim())));
        }
        let o = Self::offsets(c);
        let p = &self.params;
        let h = c.hidden;
        let mut h1 = vec![0.0; h];
        Self::layer(&p[o.w1..o.b1], &p[o.b1..o.w2], x, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());
        if h1.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite { layer: "hidden1" });
        }
        let mut h2 = vec![0.0; h];
        Self::layer(&p[o.w2..o.b2], &p[o.b2..o.w3], &h1, &mut h2);
        h2.iter_mut().for_each(|v| *v = v.tanh());
        if h2.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite { layer: "hidden2" });
        }
        let mut out = [0.0; 3];
        Self::layer(&p[o.w3..o.b3], &p[o.b3..], &h2, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite { layer: "output" });
        }
        Ok((h1, h2, out))
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(out)`.
    fn backward(&self, x: &[f64], h1: &[f64], h2: &[f64], dout: [f64; 3], grad: &mut [f64]) {
        let c = &self.config;
        let o = Self::offsets(c);
        let p = &self.params;
        let (n_in, h) = (x.len(), c.hidden);
        let mut dh2 = vec![0.0; h];
        for (k, &d) in dout.iter().enumerate() {
            grad[o.b3 + k] += d;
            for j in 0..h {
                grad[o.w3 + k * h + j] += d * h2[j];
                dh2[j] += d * p[o.w3 + k * h + j];
            }
        }
        let mut dh1 = vec![0.0; h];
        for i in 0..h {
            let da = dh2[i] * (1.0 - h2[i] * h2[i]);
            grad[o.b2 + i] += da;
            let row = o.w2 + i * h;
            for j in 0..h {
                grad[row + j] += da * h1[j];
                dh1[j] += da * p[row + j];
            }
        }
        for i in 0..h {
            let da = dh1[i] * (1.0 - h1[i] * h1[i]);
            grad[o.b1 + i] += da;
            let row = o.w1 + i * n_in;
            for j in 0..n_in {
                grad[row + j] += da * x[j];
            }
        }
    }

    /// Writes a flat checkpoint: magic, architecture hash, count, f64 LE values.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = b"TRLX".to_vec();
        out.extend_from_slice(&self.config.architecture_hash().to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint(config: RelighterConfig, bytes: &[u8]) -> Result<Self, DiffusionError> {
        let bad = |m: &str| DiffusionError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..4] != b"TRLX" {
            return Err(bad("bad magic"));
        }
        let hash = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        if hash != config.architecture_hash() {
            return Err(bad("architecture hash mismatch"));
        }
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if n != config.num_params() || bytes.len() != 20 + 8 * n {
            return Err(bad("parameter count mismatch"));
        }
        let params = bytes[20..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(Self { config, params })
    }
}

/// Mean over pixels of the squared error between the model output and the
/// objective's target, with its parameter gradient.
///
/// `gaussian` holds one noise triplet per entry of `pixels`.
pub fn flow_loss(
    model: &TinyRelighter,
    ex: &ToyExample,
    pixels: &[usize],
    t: f64,
    gaussian: &[[f64; 3]],
    objective: Objective,
) -> Result<(f64, Vec<f64>), DiffusionError> {
    check_t(t)?;
    if gaussian.len() != pixels.len() {
        return Err(DiffusionError::Shape(format!("{} noise samples for {} pixels", gaussian.len(), pixels.len())));
    }
    let n_px = ex.width * ex.height;
    if ex.input.len() != n_px || ex.condition.len() != n_px || ex.target.len() != n_px {
        return Err(DiffusionError::Shape("example frames differ in size".into()));
    }
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    let scale = 1.0 / pixels.len().max(1) as f64;
    for (&idx, eps) in pixels.iter().zip(gaussian) {
        let clean = ex.target[idx].map(|v| v as f64);
        let mut z = [0.0; 3];
        let mut target = [0.0; 3];
        for k in 0..3 {
            z[k] = t * clean[k] + (1.0 - t) * eps[k];
            target[k] = match objective {
                Objective::Velocity => clean[k] - eps[k],
                Objective::NoisedLatent => z[k],
            };
        }
        let x = model.features(ex, idx, z, t);
        let (h1, h2, out) = model.forward_cached(&x)?;
        let mut dout = [0.0; 3];
        for k in 0..3 {
            let r = out[k] - target[k];
            loss += r * r * scale;
            dout[k] = 2.0 * r * scale;
        }
        model.backward(&x, &h1, &h2, dout, &mut grad);
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Biased,
    Uniform,
}

impl SamplerMode {
    pub fn distribution(self) -> TimestepDistribution {
        match self {
            SamplerMode::Biased => TimestepDistribution::default(),
            SamplerMode::Uniform => TimestepDistribution::uniform(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SamplerMode::Biased => "biased",
            SamplerMode::Uniform => "uniform",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub pixels_per_step: usize,
    pub val_every: usize,
    /// Validation timesteps, evenly spaced over `(0, 1)`.
    pub val_timesteps: usize,
    pub objective: Objective,
    pub model: RelighterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            pixels_per_step: 64,
            val_every: 100,
            val_timesteps: 8,
            objective: Objective::Velocity,
            model: RelighterConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub mode: SamplerMode,
    pub seed: u64,
    pub train: Vec<LossPoint>,
    pub val: Vec<LossPoint>,
}

impl LossCurve {
    pub fn all_finite(&self) -> bool {
        self.train.iter().chain(&self.val).all(|p| p.loss.is_finite())
    }
}

/// Fixed validation set: every pixel of every example at evenly spaced
/// timesteps, with noise keyed independently of the training stream.
fn validation_loss(model: &TinyRelighter, data: &[ToyExample], cfg: &TrainConfig) -> Result<f64, DiffusionError> {
    let mut total = 0.0;
    let mut count = 0;
    for (e, ex) in data.iter().enumerate() {
        let pixels: Vec<usize> = (0..ex.width * ex.height).collect();
        for k in 0..cfg.val_timesteps {
            let t = (k as f64 + 0.5) / cfg.val_timesteps as f64;
            let mut rng = CounterRng::new(&[0x7A1, e as u64, k as u64]);
            let noise: Vec<[f64; 3]> = pixels.iter().map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
            let (l, _) = flow_loss(model, ex, &pixels, t, &noise, cfg.objective)?;
            total += l;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Trains a fresh [`TinyRelighter`] with the given timestep sampler.
///
/// Deterministic in `(data, mode, seed, cfg)`.
pub fn train_toy(data: &[ToyExample], mode: SamplerMode, seed: u64, cfg: &TrainConfig) -> Result<(TinyRelighter, LossCurve), DiffusionError> {
    if data.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let dist = mode.distribution();
    let mut model = TinyRelighter::new(cfg.model, seed);
    let mut adam = AdamState::new(model.params.len());
    let mut curve = LossCurve {
        mode,
        seed,
        train: Vec::new(),
        val: vec![LossPoint {
            step: 0,
            loss: validation_loss(&model, data, cfg)?,
        }],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(hash_key(&[seed, mode as u64]));
    for step in 1..=cfg.steps {
        let ex = &data[rng.gen_range(0..data.len())];
        let n_px = ex.width * ex.height;
        let pixels: Vec<usize> = (0..cfg.pixels_per_step).map(|_| rng.gen_range(0..n_px)).collect();
        let t = dist.sample(&mut rng);
        let noise: Vec<[f64; 3]> = pixels.iter().map(|_| [0, 1, 2].map(|_| standard_normal(&mut rng))).collect();
        let (loss, grad) = flow_loss(&model, ex, &pixels, t, &noise, cfg.objective)?;
        curve.train.push(LossPoint { step, loss });
        adam.step(&mut model.params, &grad, cfg.lr)?;
        if cfg.val_every > 0 && (step % cfg.val_every == 0 || step == cfg.steps) {
            curve.val.push(LossPoint {
                step,
                loss: validation_loss(&model, data, cfg)?,
            });
        }
    }
    Ok((model, curve))
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
