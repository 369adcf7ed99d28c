use serde::{Deserialize, Serialize};

use crate::error::{DiecError, Result};
use crate::numeric::Tensor;

/// Linear-beta noise schedule. Index 0 of every table is the `t = 0`
/// convention (`alpha_bar[0] = 1`); timesteps run `1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(DiecError::param("schedule needs T >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiecError::param(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut beta = vec![0.0; steps + 1];
        let mut alpha = vec![1.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            let frac = if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
            beta[t] = beta_start + frac * (beta_end - beta_start);
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        Ok(NoiseSchedule { steps, beta_start, beta_end, beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Posterior variance `(1 - abar[t-1]) / (1 - abar[t]) * beta[t]`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(DiecError::param(format!("timestep {t} outside [1, {}]", self.steps)));
        }
        Ok(())
    }
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn forward_noising(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(DiecError::shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Per-sample timesteps: row `i` of `x0` is noised at `ts[i]`.
pub fn forward_noising_rows(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() || ts.len() != x0.rows() {
        return Err(DiecError::shape("forward_noising_rows: shape mismatch"));
    }
    let len = x0.row_len();
    let mut data = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        sched.check_timestep(t)?;
        let ab = sched.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let xs = &x0.data()[i * len..(i + 1) * len];
        let es = &eps.data()[i * len..(i + 1) * len];
        data.extend(xs.iter().zip(es).map(|(&x, &e)| a * x + b * e));
    }
    Tensor::new(x0.shape().to_vec(), data)
}
