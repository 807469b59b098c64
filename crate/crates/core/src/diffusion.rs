//! Variance schedules, the closed-form forward marginal, the ancestral
//! reverse step and the training-pair sampler.
//!
//! Timesteps run `1..=T`; `t = 0` is the clean image. Schedule coefficients
//! are held in `f64` and rounded to `f32` only when applied to images.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ImageTensor, Tensor};

pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("schedule needs at least 2 timesteps, got {0}")]
    TooFewSteps(usize),
    #[error("cosine offset must be finite and >= 0, got {0}")]
    BadOffset(f64),
    #[error("timestep {t} outside 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("noise must be zero at the final step t = 1")]
    NoiseAtFinalStep,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    kind: ScheduleKind,
    // index 0 holds the clean-image convention: beta = 0, alpha_bar = 1
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

fn cosine_f(t: f64, steps: f64, s: f64) -> f64 {
    (((t / steps + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2)
        .cos()
        .powi(2)
}

/// Build a schedule with `steps` timesteps. `offset` is the cosine `s`
/// and is ignored for the linear schedule.
pub fn make_schedule(kind: ScheduleKind, steps: usize, offset: f64) -> Result<VarianceSchedule, DiffusionError> {
    if steps < 2 {
        return Err(DiffusionError::TooFewSteps(steps));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            if !(offset.is_finite() && offset >= 0.0) {
                return Err(DiffusionError::BadOffset(offset));
            }
            let n = steps as f64;
            let f0 = cosine_f(0.0, n, offset);
            (1..=steps)
                .map(|t| {
                    let prev = cosine_f((t - 1) as f64, n, offset) / f0;
                    let cur = cosine_f(t as f64, n, offset) / f0;
                    (1.0 - cur / prev).min(MAX_BETA)
                })
                .collect()
        }
        ScheduleKind::Linear => (0..steps)
            .map(|i| LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    Ok(VarianceSchedule::from_betas(kind, &betas))
}

impl VarianceSchedule {
    fn from_betas(kind: ScheduleKind, betas: &[f64]) -> Self {
        let mut b = vec![0.0];
        b.extend_from_slice(betas);
        let alphas: Vec<f64> = b.iter().map(|beta| 1.0 - beta).collect();
        let mut alpha_bars = vec![1.0];
        for t in 1..b.len() {
            alpha_bars.push(alpha_bars[t - 1] * alphas[t]);
        }
        Self {
            kind,
            betas: b,
            alphas,
            alpha_bars,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// `T`, the number of diffusion steps.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    /// `beta[t]`; `t = 0` gives 0.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// `alpha_bar[t]`; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            Err(DiffusionError::TimestepOutOfRange { t, steps: self.steps() })
        } else {
            Ok(())
        }
    }
}

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// `sqrt(alpha_bar[t])·x0 + sqrt(1 − alpha_bar[t])·epsilon`.
pub fn forward_diffuse(
    x0: &ImageTensor,
    t: usize,
    epsilon: &ImageTensor,
    sched: &VarianceSchedule,
) -> Result<ImageTensor, DiffusionError> {
    sched.check_t(t)?;
    same_shape(x0, epsilon)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let mut out = x0.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(epsilon.data()) {
        *o = a * *o + b * e;
    }
    Ok(out)
}

/// One ancestral denoising step from `x_t` to `x_{t-1}` with
/// `sigma_t² = beta[t]`. At `t = 1` the noise must be zero and the result
/// is the final sample.
pub fn reverse_step(
    x_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    sched: &VarianceSchedule,
    z: &ImageTensor,
) -> Result<ImageTensor, DiffusionError> {
    sched.check_t(t)?;
    same_shape(x_t, eps_hat)?;
    same_shape(x_t, z)?;
    if t == 1 && z.data().iter().any(|&v| v != 0.0) {
        return Err(DiffusionError::NoiseAtFinalStep);
    }
    let beta = sched.beta(t);
    let inv_sqrt_alpha = (1.0 / sched.alpha(t).sqrt()) as f32;
    let eps_coef = (beta / (1.0 - sched.alpha_bar(t)).sqrt()) as f32;
    let sigma = beta.sqrt() as f32;
    let mut out = x_t.clone();
    for ((o, &e), &zv) in out.data_mut().iter_mut().zip(eps_hat.data()).zip(z.data()) {
        *o = inv_sqrt_alpha * (*o - eps_coef * e) + sigma * zv;
    }
    Ok(out)
}

/// Noise estimate consistent with the clean-image estimate implied by
/// `eps_hat`, after clipping that estimate to `[-1, 1]`. Leaves `eps_hat`
/// unchanged whenever the implied clean image is already in range.
pub fn clip_noise_estimate(
    x_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    sched: &VarianceSchedule,
) -> Result<ImageTensor, DiffusionError> {
    sched.check_t(t)?;
    same_shape(x_t, eps_hat)?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let mut out = eps_hat.clone();
    for (e, &x) in out.data_mut().iter_mut().zip(x_t.data()) {
        let x0 = (x - sb * *e) / sa;
        if !(-1.0..=1.0).contains(&x0) {
            *e = (x - sa * x0.clamp(-1.0, 1.0)) / sb;
        }
    }
    Ok(out)
}

/// Deterministic jump from `x_t` to an estimate of `x_target` (`target < t`)
/// through the clean-image estimate implied by `eps_hat`, clipped to
/// `[-1, 1]`. `target = 0` returns the clipped clean estimate itself.
pub fn project_to(
    x_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    target: usize,
    sched: &VarianceSchedule,
) -> Result<ImageTensor, DiffusionError> {
    sched.check_t(t)?;
    same_shape(x_t, eps_hat)?;
    let ab = sched.alpha_bar(t);
    let ab_target = sched.alpha_bar(target.min(t));
    let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let (ta, tb) = (ab_target.sqrt() as f32, (1.0 - ab_target).sqrt() as f32);
    let mut out = x_t.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps_hat.data()) {
        let x0 = ((*o - sb * e) / sa).clamp(-1.0, 1.0);
        *o = ta * x0 + tb * e;
    }
    Ok(out)
}

/// i.i.d. standard normal tensor.
pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> ImageTensor {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

/// One noised training example.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub t: usize,
    pub epsilon: ImageTensor,
    pub x_t: ImageTensor,
}

/// Draw `t ~ U{1..T}`, then `epsilon ~ N(0, I)` shaped like `x0`, and
/// diffuse. Draw order is fixed: timestep first, then noise in row-major
/// order.
pub fn sample_training_pair(x0: &ImageTensor, sched: &VarianceSchedule, rng: &mut impl Rng) -> NoiseSample {
    let t = rng.random_range(1..=sched.steps());
    let epsilon = standard_normal(x0.shape(), rng);
    let x_t = forward_diffuse(x0, t, &epsilon, sched).expect("t drawn in range, shapes equal");
    NoiseSample { t, epsilon, x_t }
}
