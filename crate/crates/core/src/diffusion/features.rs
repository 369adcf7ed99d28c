//! Pooled, trial-averaged tap features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::schedule::{forward_noising, NoiseSchedule};
use crate::diffusion::unet::{DenoiserModel, Tap};
use crate::error::{DiecError, Result};
use crate::numeric::{Matrix, Rng, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Global average over spatial positions; one value per channel.
    #[default]
    Average,
    /// Channel-major flattening of the whole activation.
    Flatten,
}

#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub embeddings: Matrix,
    pub tap: Tap,
    pub t: usize,
    pub trials: usize,
    pub pooling: Pooling,
}

pub const FEATURE_CHUNK: usize = 64;

/// Pools an `[N, C, h, w]` activation into `N` rows.
pub fn pool_activation(act: &Tensor, pooling: Pooling) -> Result<Matrix> {
    let [n, c, h, w] = act.shape() else {
        return Err(DiecError::shape(format!("expected NCHW activation, got {:?}", act.shape())));
    };
    let (n, c, hw) = (*n, *c, h * w);
    match pooling {
        Pooling::Average => {
            let mut out = Matrix::zeros(n, c);
            for i in 0..n {
                for ch in 0..c {
                    let seg = &act.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    out[(i, ch)] = seg.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
                }
            }
            Ok(out)
        }
        Pooling::Flatten => Matrix::from_vec(n, c * hw, act.data().iter().map(|&v| v as f64).collect()),
    }
}

/// Features for several taps from explicit noise draws: `noises[r]` has the
/// shape of `x0` and supplies trial `r`.
pub fn extract_features_with_noise(
    model: &DenoiserModel,
    x0: &Tensor,
    taps: &[Tap],
    t: usize,
    noises: &[Tensor],
    sched: &NoiseSchedule,
    pooling: Pooling,
) -> Result<BTreeMap<Tap, FeatureBatch>> {
    if noises.is_empty() {
        return Err(DiecError::param("need at least one noise trial"));
    }
    if taps.is_empty() {
        return Err(DiecError::param("no taps requested"));
    }
    sched.check_timestep(t)?;
    let n = x0.rows();
    let mut sums: BTreeMap<Tap, Option<Matrix>> = taps.iter().map(|&tp| (tp, None)).collect();
    let idx: Vec<usize> = (0..n).collect();
    for noise in noises {
        let xt = forward_noising(x0, t, noise, sched)?;
        for chunk in idx.chunks(FEATURE_CHUNK) {
            let batch = xt.select_rows(chunk);
            let acts = model.tap_activations(&batch, &vec![t; chunk.len()], taps)?;
            for (&tap, act) in &acts {
                let pooled = pool_activation(act, pooling)?;
                let slot = sums.get_mut(&tap).expect("requested tap");
                let acc = slot.get_or_insert_with(|| Matrix::zeros(n, pooled.cols()));
                for (j, &i) in chunk.iter().enumerate() {
                    for (a, v) in acc.row_mut(i).iter_mut().zip(pooled.row(j)) {
                        *a += v;
                    }
                }
            }
        }
    }
    let r = noises.len() as f64;
    Ok(sums
        .into_iter()
        .map(|(tap, m)| {
            let mut m = m.unwrap_or_else(|| Matrix::zeros(n, 0));
            for i in 0..m.rows() {
                m.row_mut(i).iter_mut().for_each(|v| *v /= r);
            }
            (tap, FeatureBatch { embeddings: m, tap, t, trials: noises.len(), pooling })
        })
        .collect())
}

/// Draws `trials` noise tensors; sample `i` of trial `r` uses substream `(i, r)`.
pub fn draw_trial_noise(x0: &Tensor, trials: usize, rng: &Rng) -> Result<Vec<Tensor>> {
    let len = x0.row_len();
    (0..trials)
        .map(|r| {
            let mut data = Vec::with_capacity(x0.numel());
            for i in 0..x0.rows() {
                data.extend(rng.substream_path(&[i as u64, r as u64]).normal_vec(len));
            }
            Tensor::new(x0.shape().to_vec(), data)
        })
        .collect()
}

/// Trial-averaged pooled features of several taps at timestep `t`.
pub fn extract_features_multi(
    model: &DenoiserModel,
    x0: &Tensor,
    taps: &[Tap],
    t: usize,
    trials: usize,
    sched: &NoiseSchedule,
    pooling: Pooling,
    rng: &Rng,
) -> Result<BTreeMap<Tap, FeatureBatch>> {
    if trials < 1 {
        return Err(DiecError::param("R must be at least 1"));
    }
    let noises = draw_trial_noise(x0, trials, rng)?;
    extract_features_with_noise(model, x0, taps, t, &noises, sched, pooling)
}

#[allow(clippy::too_many_arguments)]
pub fn extract_features(
    model: &DenoiserModel,
    x0: &Tensor,
    tap: Tap,
    t: usize,
    trials: usize,
    sched: &NoiseSchedule,
    pooling: Pooling,
    rng: &Rng,
) -> Result<FeatureBatch> {
    let mut m = extract_features_multi(model, x0, &[tap], t, trials, sched, pooling, rng)?;
    Ok(m.remove(&tap).expect("requested tap"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::unet::UNetConfig;

    fn setup() -> (DenoiserModel, NoiseSchedule, Tensor) {
        let cfg = UNetConfig { widths: [4, 8, 8, 8], ..UNetConfig::default() };
        let m = DenoiserModel::new(cfg, &mut Rng::new(1)).unwrap();
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let x0 = Tensor::new(vec![6, 1, 16, 16], Rng::new(2).normal_vec(6 * 256)).unwrap();
        (m, sched, x0)
    }

    #[test]
    fn single_trial_equals_pooled_tap() {
        let (m, sched, x0) = setup();
        let noise = draw_trial_noise(&x0, 1, &Rng::new(3)).unwrap();
        let f = extract_features_with_noise(&m, &x0, &[Tap::D3], 40, &noise, &sched, Pooling::Average).unwrap();
        let xt = forward_noising(&x0, 40, &noise[0], &sched).unwrap();
        let (_, acts) = m.denoise_predict(&xt, &[40; 6], &[Tap::D3]).unwrap();
        let direct = pool_activation(&acts[&Tap::D3], Pooling::Average).unwrap();
        for (a, b) in f[&Tap::D3].embeddings.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn antithetic_pair_averages_single_trials() {
        let (m, sched, x0) = setup();
        let e = draw_trial_noise(&x0, 1, &Rng::new(4)).unwrap().remove(0);
        let neg = Tensor::new(e.shape().to_vec(), e.data().iter().map(|v| -v).collect()).unwrap();
        let pair = extract_features_with_noise(&m, &x0, &[Tap::U2], 30, &[e.clone(), neg.clone()], &sched, Pooling::Average).unwrap();
        let a = extract_features_with_noise(&m, &x0, &[Tap::U2], 30, &[e], &sched, Pooling::Average).unwrap();
        let b = extract_features_with_noise(&m, &x0, &[Tap::U2], 30, &[neg], &sched, Pooling::Average).unwrap();
        let (p, a, b) = (&pair[&Tap::U2].embeddings, &a[&Tap::U2].embeddings, &b[&Tap::U2].embeddings);
        for k in 0..p.data().len() {
            assert!((p.data()[k] - 0.5 * (a.data()[k] + b.data()[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn flatten_dimension() {
        let (m, sched, x0) = setup();
        let f = extract_features(&m, &x0, Tap::D2, 5, 1, &sched, Pooling::Flatten, &Rng::new(1)).unwrap();
        assert_eq!(f.embeddings.cols(), 8 * 8 * 8);
        let f = extract_features(&m, &x0, Tap::D2, 5, 1, &sched, Pooling::Average, &Rng::new(1)).unwrap();
        assert_eq!(f.embeddings.cols(), 8);
    }

    #[test]
    fn zero_trials_rejected() {
        let (m, sched, x0) = setup();
        let r = extract_features(&m, &x0, Tap::D1, 5, 0, &sched, Pooling::Average, &Rng::new(1));
        assert!(matches!(r, Err(DiecError::Param(_))));
    }

    /// Variance of the trial mean shrinks roughly as 1/R.
    #[test]
    fn trial_average_variance_shrinks() {
        let (m, sched, x0) = setup();
        let x0 = x0.select_rows(&[0]);
        let row_var = |r: usize| {
            let mut vals = Vec::new();
            for s in 0..24u64 {
                let f = extract_features(&m, &x0, Tap::D2, 60, r, &sched, Pooling::Average, &Rng::new(100 + s)).unwrap();
                vals.push(f.embeddings.row(0).to_vec());
            }
            let d = vals[0].len();
            let mut total = 0.0;
            for j in 0..d {
                let mean = vals.iter().map(|v| v[j]).sum::<f64>() / vals.len() as f64;
                total += vals.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            }
            total / d as f64
        };
        let ratio = row_var(8) / row_var(64);
        assert!((4.0..=16.0).contains(&ratio), "variance ratio {ratio}");
    }
}
