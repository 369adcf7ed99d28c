//! Denoising pretraining.

use serde::{Deserialize, Serialize};

use crate::diffusion::schedule::{forward_noising_rows, NoiseSchedule};
use crate::diffusion::unet::{DenoiserModel, ParamBinder};
use crate::error::{DiecError, Result};
use crate::numeric::optim::Adam;
use crate::numeric::tape::{Gradients, Tape, Var};
use crate::numeric::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Also record the fixed-set denoising loss after every epoch.
    #[serde(default)]
    pub track_eval: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 80, batch_size: 32, lr: 2e-4, track_eval: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean per-element denoising MSE for each epoch.
    pub epoch_loss: Vec<f64>,
    /// Fixed-set loss after each epoch; empty unless `track_eval`.
    #[serde(default)]
    pub eval_loss: Vec<f64>,
    pub steps: u64,
}

/// Noise-prediction MSE recorded on `tape` for a batch noised at per-row
/// timesteps `ts` with noise `eps`.
pub fn denoise_loss_on_tape(
    model: &DenoiserModel,
    tape: &mut Tape<f32>,
    binder: &mut ParamBinder<'_>,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let xt = forward_noising_rows(x0, ts, eps, sched)?;
    let x = tape.constant(xt.shape().to_vec(), xt.into_data())?;
    let out = model.forward_on_tape(tape, binder, x, ts, None)?;
    tape.mse(out.eps.expect("full forward"), eps.data().to_vec())
}

/// Applies Adam to every parameter that received a gradient.
pub fn apply_gradients(
    model: &mut DenoiserModel,
    bound: &[(usize, Var)],
    grads: &Gradients<f32>,
    opt: &mut Adam,
    lr: f64,
    slot_offset: usize,
) {
    for &(i, v) in bound {
        if let Some(g) = grads.get(v) {
            opt.update(slot_offset + i, model.params_mut().tensor_mut(i).data_mut(), g, lr);
        }
    }
}

pub fn check_dataset(x0: &Tensor, model: &DenoiserModel) -> Result<()> {
    let cfg = model.config();
    if x0.rows() == 0 || x0.numel() == 0 {
        return Err(DiecError::param("empty dataset"));
    }
    if x0.shape() != [x0.rows(), cfg.in_channels, cfg.image_size, cfg.image_size] {
        return Err(DiecError::shape(format!("dataset {:?} does not match model input", x0.shape())));
    }
    Ok(())
}

const EVAL_STREAM: u64 = u64::MAX;

pub fn pretrain(
    model: &mut DenoiserModel,
    data: &Tensor,
    cfg: &PretrainConfig,
    sched: &NoiseSchedule,
    rng: &Rng,
) -> Result<PretrainLog> {
    check_dataset(data, model)?;
    if cfg.batch_size == 0 {
        return Err(DiecError::param("batch size must be positive"));
    }
    let n = data.rows();
    let mut opt = Adam::default();
    let mut log = PretrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut erng = rng.substream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        erng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x0 = data.select_rows(chunk);
            let ts: Vec<usize> = chunk.iter().map(|_| 1 + erng.below(sched.steps())).collect();
            let eps = Tensor::new(x0.shape().to_vec(), erng.normal_vec(x0.numel()))?;
            let mut tape = Tape::<f32>::new();
            let (loss, bound) = {
                let mut binder = ParamBinder::new(model.params(), true);
                let loss = denoise_loss_on_tape(model, &mut tape, &mut binder, &x0, &ts, &eps, sched)?;
                (loss, binder.bound().collect::<Vec<_>>())
            };
            total += tape.scalar(loss) as f64;
            batches += 1;
            let grads = tape.backward(loss)?;
            opt.begin_step();
            apply_gradients(model, &bound, &grads, &mut opt, cfg.lr, 0);
            log.steps += 1;
        }
        log.epoch_loss.push(total / batches.max(1) as f64);
        if cfg.track_eval {
            log.eval_loss.push(fixed_eval_denoise_loss(model, data, sched, &rng.substream(EVAL_STREAM))?);
        }
    }
    Ok(log)
}

/// Denoising MSE at fixed `(t_i, eps_i)` per sample drawn from `rng`; the same
/// `rng` state always yields the same evaluation set.
pub fn fixed_eval_denoise_loss(model: &DenoiserModel, data: &Tensor, sched: &NoiseSchedule, rng: &Rng) -> Result<f64> {
    check_dataset(data, model)?;
    let n = data.rows();
    let mut total = 0.0;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(64) {
        let x0 = data.select_rows(chunk);
        let mut ts = Vec::with_capacity(chunk.len());
        let mut noise = Vec::with_capacity(x0.numel());
        for &i in chunk {
            let mut r = rng.substream(i as u64);
            ts.push(1 + r.below(sched.steps()));
            noise.extend(r.normal_vec(x0.row_len()));
        }
        let eps = Tensor::new(x0.shape().to_vec(), noise)?;
        let xt = forward_noising_rows(&x0, &ts, &eps, sched)?;
        let pred = model.predict_eps(&xt, &ts)?;
        total += pred.data().iter().zip(eps.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>();
        count += pred.numel();
    }
    Ok(total / count as f64)
}
