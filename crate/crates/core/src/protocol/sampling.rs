//! Generation from pure noise, with the reverse chain split between the
//! shared model (high-noise steps) and a client's local model.

use rand::Rng;

use super::cut::CutConfig;
use crate::diffusion::{clip_noise_estimate, reverse_step, standard_normal, VarianceSchedule};
use crate::net::{Model, NetError};
use crate::tensor::{ImageTensor, Tensor};

/// Result of a split reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSample {
    pub images: ImageTensor,
    /// The chain state right after the server's last step, at `t_split`.
    pub boundary: ImageTensor,
    /// Snapshots `(t, x_t)` requested by the caller, in chain order.
    pub trace: Vec<(usize, ImageTensor)>,
}

fn denoise_step(
    model: &Model,
    x: &ImageTensor,
    t: usize,
    sched: &VarianceSchedule,
    rng: &mut impl Rng,
) -> Result<ImageTensor, NetError> {
    let n = x.batch();
    let eps_hat = model.predict_noise(x, &vec![t; n])?;
    let eps_hat = clip_noise_estimate(x, t, &eps_hat, sched).expect("t in range, shapes match");
    let z = if t > 1 {
        standard_normal(x.shape(), rng)
    } else {
        Tensor::zeros(x.shape())
    };
    let next = reverse_step(x, t, &eps_hat, sched, &z).expect("t in range, shapes match");
    // at t = 1 the step returns the clipped clean estimate up to rounding
    Ok(if t == 1 { next.map(|v| v.clamp(-1.0, 1.0)) } else { next })
}

/// Server runs `t = T ..= t_split + 1`, client runs `t = t_split ..= 1`.
/// Draw order: `x_T` first, then one noise tensor per step with `t > 1`.
pub fn split_inference(
    shared: &Model,
    local: &Model,
    cut: &CutConfig,
    sched: &VarianceSchedule,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(ImageTensor, ImageTensor), NetError> {
    let s = split_inference_traced(shared, local, cut, sched, n, &[], rng)?;
    Ok((s.images, s.boundary))
}

/// [`split_inference`] that also records the chain state at each `t` in
/// `snapshots` (`t = T` is the initial noise, `t = 0` the final images).
pub fn split_inference_traced(
    shared: &Model,
    local: &Model,
    cut: &CutConfig,
    sched: &VarianceSchedule,
    n: usize,
    snapshots: &[usize],
    rng: &mut impl Rng,
) -> Result<SplitSample, NetError> {
    let steps = sched.steps();
    let mut x = standard_normal(&shared.config().image_shape(n), rng);
    let mut trace = Vec::new();
    let mut boundary = None;
    if snapshots.contains(&steps) {
        trace.push((steps, x.clone()));
    }
    if cut.t_split() == steps {
        boundary = Some(x.clone());
    }
    for t in (1..=steps).rev() {
        let model = if cut.is_server_step(t) { shared } else { local };
        x = denoise_step(model, &x, t, sched, rng)?;
        if snapshots.contains(&(t - 1)) {
            trace.push((t - 1, x.clone()));
        }
        if t - 1 == cut.t_split() {
            boundary = Some(x.clone());
        }
    }
    Ok(SplitSample {
        boundary: boundary.expect("t_split lies in 0..=T"),
        images: x,
        trace,
    })
}

/// Plain single-model reverse chain with the same draw order.
pub fn sample_monolithic(
    model: &Model,
    sched: &VarianceSchedule,
    n: usize,
    rng: &mut impl Rng,
) -> Result<ImageTensor, NetError> {
    let mut x = standard_normal(&model.config().image_shape(n), rng);
    for t in (1..=sched.steps()).rev() {
        x = denoise_step(model, &x, t, sched, rng)?;
    }
    Ok(x)
}
