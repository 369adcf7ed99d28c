use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::unet::DenoiserModel;
use crate::error::{DiecError, Result};
use crate::numeric::{Rng, Tensor};

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`, clamped to
/// `[-1, 1]` after the final step only.
pub fn sample(model: &DenoiserModel, sched: &NoiseSchedule, n: usize, rng: &Rng) -> Result<Tensor> {
    let cfg = model.config();
    let len = cfg.input_len();
    let mut init = Vec::with_capacity(n * len);
    for i in 0..n {
        init.extend(rng.substream_path(&[i as u64, 0]).normal_vec(len));
    }
    sample_from(model, sched, Tensor::new(vec![n, cfg.in_channels, cfg.image_size, cfg.image_size], init)?, rng)
}

/// Runs the reverse chain from a given `x_T` batch. Row `i` draws its step
/// noise from `rng` substream `[i, t]`.
pub fn sample_from(model: &DenoiserModel, sched: &NoiseSchedule, x_t: Tensor, rng: &Rng) -> Result<Tensor> {
    let cfg = model.config();
    let len = cfg.input_len();
    let n = x_t.rows();
    let shape = vec![n, cfg.in_channels, cfg.image_size, cfg.image_size];
    if x_t.shape() != shape.as_slice() {
        return Err(DiecError::shape(format!("x_T {:?} does not match model input", x_t.shape())));
    }
    if n == 0 {
        return Ok(x_t);
    }
    let mut out = Vec::with_capacity(n * len);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(64) {
        let mut x: Vec<f32> = x_t.select_rows(chunk).into_data();
        let bshape = vec![chunk.len(), cfg.in_channels, cfg.image_size, cfg.image_size];
        for t in (1..=sched.steps()).rev() {
            let xt = Tensor::new(bshape.clone(), x.clone())?;
            let ts = vec![t; chunk.len()];
            let eps = model.predict_eps(&xt, &ts)?;
            let (alpha, beta, ab) = (sched.alpha(t), sched.beta(t), sched.alpha_bar(t));
            let coef = beta / (1.0 - ab).sqrt();
            let inv_sqrt_alpha = 1.0 / alpha.sqrt();
            let sigma = sched.posterior_variance(t).sqrt();
            for (j, &i) in chunk.iter().enumerate() {
                let mut noise_rng = rng.substream_path(&[i as u64, t as u64]);
                for k in 0..len {
                    let p = j * len + k;
                    let mean = inv_sqrt_alpha * (x[p] as f64 - coef * eps.data()[p] as f64);
                    let z = if sigma > 0.0 { noise_rng.normal() } else { 0.0 };
                    x[p] = (mean + sigma * z) as f32;
                }
            }
            if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
                return Err(DiecError::Singular(format!("sampling diverged at t={t}: {bad}")));
            }
        }
        out.extend(x.into_iter().map(|v| v.clamp(-1.0, 1.0)));
    }
    Tensor::new(shape, out)
}
