//! Joint clustering fine-tuning on a selected readout.

pub mod assign;
pub mod graph;
pub mod head;

use serde::{Deserialize, Serialize};

pub use assign::{hard_labels, kl_loss, soft_assign, target_distribution};
pub use graph::{build_affinity, graph_losses, update_affinity, AffinityGraph};
pub use head::{residual_embed, ResidualHead};

use crate::cluster::{kmeans, KMeansConfig};
use crate::diffusion::features::{pool_activation, Pooling, FEATURE_CHUNK};
use crate::diffusion::schedule::forward_noising_rows;
use crate::diffusion::train::{apply_gradients, check_dataset, denoise_loss_on_tape, fixed_eval_denoise_loss};
use crate::diffusion::unet::ParamBinder;
use crate::diffusion::{forward_noising, DenoiserModel, NoiseSchedule, Tap};
use crate::error::{DiecError, Result};
use crate::metrics::{evaluate, Metrics};
use crate::numeric::optim::Adam;
use crate::numeric::tape::{NeighborTerm, Tape};
use crate::numeric::{Matrix, Rng, Tensor};

const PHASE1_STREAM: u64 = 10;
const REFRESH_STREAM: u64 = 11;
const BATCH_STREAM: u64 = 12;
const DENOISE_EVAL_STREAM: u64 = 13;
const FINAL_STREAM: u64 = 14;
const HEAD_STREAM: u64 = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiecConfig {
    pub alpha_kl: f64,
    pub beta_gr: f64,
    pub gamma_en: f64,
    /// Noise trials `M` averaged for initialization and target refreshes.
    pub trials: usize,
    pub target_interval: usize,
    pub max_epochs: usize,
    pub knn: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub lr_centroids: f64,
    pub freeze_backbone: bool,
    pub use_lre: bool,
    /// Student-t degree of freedom.
    pub student_alpha: f64,
    /// Stop once fewer than this fraction of labels change between refreshes.
    pub stop_tol: f64,
    /// Refreshes a cluster may stay empty before its centroid is reseeded.
    pub degenerate_patience: usize,
    /// Rescale pooled features to unit RMS radius before Phase 1.
    pub standardize: bool,
    pub kmeans: KMeansConfig,
}

impl Default for DiecConfig {
    fn default() -> Self {
        DiecConfig {
            alpha_kl: 0.1,
            beta_gr: 0.01,
            gamma_en: 0.001,
            trials: 8,
            target_interval: 5,
            max_epochs: 100,
            knn: 10,
            batch_size: 32,
            lr_backbone: 2e-4,
            lr_head: 1e-3,
            lr_centroids: 1e-3,
            freeze_backbone: false,
            use_lre: true,
            student_alpha: 1.0,
            stop_tol: 0.001,
            degenerate_patience: 3,
            standardize: true,
            kmeans: KMeansConfig::default(),
        }
    }
}

impl DiecConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DiecError::Config(m.to_string()));
        if self.alpha_kl < 0.0 || self.beta_gr < 0.0 || self.gamma_en < 0.0 {
            return fail("loss weights must be non-negative");
        }
        if self.trials < 1 {
            return fail("M must be at least 1");
        }
        if self.target_interval < 1 {
            return fail("target interval must be at least 1");
        }
        if self.batch_size < 1 {
            return fail("batch size must be positive");
        }
        if !(self.student_alpha > 0.0) {
            return fail("Student-t degree must be positive");
        }
        if self.degenerate_patience < 1 {
            return fail("degenerate patience must be at least 1");
        }
        Ok(())
    }
}

/// Where embeddings are read from. Pooled features are multiplied by
/// `scale` before the head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    pub tap: Tap,
    pub t: usize,
    pub pooling: Pooling,
    pub scale: f64,
}

impl Readout {
    pub fn new(tap: Tap, t: usize, pooling: Pooling) -> Self {
        Readout { tap, t, pooling, scale: 1.0 }
    }

    pub fn dim(&self, model: &DenoiserModel) -> usize {
        let (c, h, w) = model.config().tap_shape(self.tap);
        match self.pooling {
            Pooling::Average => c,
            Pooling::Flatten => c * h * w,
        }
    }
}

/// `z̄_i`: residual embeddings averaged over `trials` noise draws; sample
/// `i` of trial `r` uses substream `(i, r)` of `rng`.
#[allow(clippy::too_many_arguments)]
pub fn embed_mean(
    model: &DenoiserModel,
    head: &ResidualHead,
    x0: &Tensor,
    readout: Readout,
    trials: usize,
    sched: &NoiseSchedule,
    rng: &Rng,
) -> Result<Matrix> {
    if trials < 1 {
        return Err(DiecError::param("need at least one trial"));
    }
    let n = x0.rows();
    let len = x0.row_len();
    let mut acc = Matrix::zeros(n, head.dim());
    let idx: Vec<usize> = (0..n).collect();
    for r in 0..trials {
        for chunk in idx.chunks(FEATURE_CHUNK) {
            let batch = x0.select_rows(chunk);
            let mut noise = Vec::with_capacity(batch.numel());
            for &i in chunk {
                noise.extend(rng.substream_path(&[i as u64, r as u64]).normal_vec(len));
            }
            let eps = Tensor::new(batch.shape().to_vec(), noise)?;
            let xt = forward_noising(&batch, readout.t, &eps, sched)?;
            let acts = model.tap_activations(&xt, &vec![readout.t; chunk.len()], &[readout.tap])?;
            let mut e = pool_activation(&acts[&readout.tap], readout.pooling)?;
            if readout.scale != 1.0 {
                e = Matrix::from_vec(e.rows(), e.cols(), e.data().iter().map(|v| v * readout.scale).collect())?;
            }
            let z = residual_embed(&e, head)?;
            for (j, &i) in chunk.iter().enumerate() {
                for (a, v) in acc.row_mut(i).iter_mut().zip(z.row(j)) {
                    *a += v;
                }
            }
        }
    }
    let inv = 1.0 / trials as f64;
    Ok(Matrix::from_vec(n, head.dim(), acc.data().iter().map(|v| v * inv).collect())?)
}

/// Phase 1: k-means on `M`-trial averaged residual embeddings.
#[allow(clippy::too_many_arguments)]
pub fn init_centroids(
    model: &DenoiserModel,
    head: &ResidualHead,
    x0: &Tensor,
    readout: Readout,
    trials: usize,
    k: usize,
    sched: &NoiseSchedule,
    kcfg: &KMeansConfig,
    rng: &Rng,
) -> Result<(Matrix, Vec<usize>)> {
    let z = embed_mean(model, head, x0, readout, trials, sched, &rng.substream(0))?;
    let res = kmeans(&z, k, kcfg, &rng.substream(1))?;
    Ok((res.centroids, res.assignments))
}

/// Noise-prediction MSE with one timestep drawn for the whole batch and
/// per-sample noise. `predict(x_t, ts)` supplies the noise estimate.
pub fn denoise_loss_random_t<P>(batch: &Tensor, sched: &NoiseSchedule, rng: &mut Rng, mut predict: P) -> Result<f64>
where
    P: FnMut(&Tensor, &[usize]) -> Result<Tensor>,
{
    let t = 1 + rng.below(sched.steps());
    let eps = Tensor::new(batch.shape().to_vec(), rng.normal_vec(batch.numel()))?;
    let xt = forward_noising(batch, t, &eps, sched)?;
    let pred = predict(&xt, &vec![t; batch.rows()])?;
    if pred.shape() != eps.shape() {
        return Err(DiecError::shape("prediction shape differs from noise shape"));
    }
    let sse: f64 = pred.data().iter().zip(eps.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
    Ok(sse / eps.numel().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    pub readout: Readout,
    pub centroids: Matrix,
    pub q: Matrix,
    pub p: Matrix,
    pub labels: Vec<usize>,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_re: f64,
    pub l_kl: f64,
    pub l_gr: f64,
    pub l_en: f64,
    pub metrics: Option<Metrics>,
    pub label_change: f64,
    /// Denoising MSE on a fixed set of per-sample timesteps and noise.
    pub denoise_eval: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_denoise_eval: f64,
    pub phase1: Option<Metrics>,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: Option<Metrics>,
    pub early_stopped: bool,
    pub events: Vec<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,L_Re,L_KL,L_Gr,L_En,ACC,NMI,ARI,label_change,denoise_eval\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.l_re,
                r.l_kl,
                r.l_gr,
                r.l_en,
                fmt_opt(r.metrics.map(|m| m.acc)),
                fmt_opt(r.metrics.map(|m| m.nmi)),
                fmt_opt(r.metrics.map(|m| m.ari)),
                r.label_change,
                r.denoise_eval
            ));
        }
        out
    }
}

fn to_f32(m: &Matrix) -> Vec<f32> {
    m.data().iter().map(|&v| v as f32).collect()
}

fn label_change(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
}

/// Inputs for joint training.
pub struct TrainSetup<'a> {
    pub data: &'a Tensor,
    pub labels: Option<&'a [usize]>,
    pub sched: &'a NoiseSchedule,
    pub readout: Readout,
    pub k: usize,
}

/// Phase 1 followed by joint training. `model` and `head` are updated in place.
pub fn train(
    model: &mut DenoiserModel,
    head: &mut ResidualHead,
    setup: &TrainSetup<'_>,
    cfg: &DiecConfig,
    rng: &Rng,
) -> Result<(ClusterState, TrainLog)> {
    cfg.validate()?;
    let TrainSetup { data, labels, sched, mut readout, k } = *setup;
    check_dataset(data, model)?;
    sched.check_timestep(readout.t)?;
    let n = data.rows();
    if k < 2 || k > n {
        return Err(DiecError::Config(format!("cluster count {k} invalid for {n} samples")));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(DiecError::shape("label count differs from sample count"));
        }
    }
    if head.dim() != readout.dim(model) {
        return Err(DiecError::shape(format!("head dim {} does not match readout dim {}", head.dim(), readout.dim(model))));
    }
    let metrics_of = |pred: &[usize]| -> Result<Option<Metrics>> { labels.map(|l| evaluate(l, pred)).transpose() };

    let mut log = TrainLog::default();
    let eval_rng = rng.substream(DENOISE_EVAL_STREAM);
    log.initial_denoise_eval = fixed_eval_denoise_loss(model, data, sched, &eval_rng)?;

    if cfg.standardize {
        let raw = Readout { scale: 1.0, ..readout };
        let z = embed_mean(model, head, data, raw, cfg.trials, sched, &rng.substream(PHASE1_STREAM).substream(0))?;
        readout.scale = unit_rms_scale(&z)?;
        log.events.push(format!("feature scale {}", readout.scale));
    }
    let (mut centroids, phase1_labels) =
        init_centroids(model, head, data, readout, cfg.trials, k, sched, &cfg.kmeans, &rng.substream(PHASE1_STREAM))?;
    log.phase1 = metrics_of(&phase1_labels)?;

    let flat = Matrix::from_vec(n, data.row_len(), data.data().iter().map(|&v| v as f64).collect())?;
    let knn = cfg.knn.min(n - 1);
    let mut graph = build_affinity(&flat, knn)?;
    let trainable = !cfg.freeze_backbone;
    let (mut opt_b, mut opt_h, mut opt_mu) = (Adam::default(), Adam::default(), Adam::default());

    let mut q_cache = Matrix::zeros(n, k);
    let mut p = Matrix::zeros(n, k);
    let mut refresh_labels: Option<Vec<usize>> = None;
    let mut epoch_labels = phase1_labels.clone();
    let mut empty_streak = vec![0usize; k];

    for epoch in 0..cfg.max_epochs {
        if epoch % cfg.target_interval == 0 {
            let z = embed_mean(model, head, data, readout, cfg.trials, sched, &rng.substream_path(&[REFRESH_STREAM, epoch as u64]))?;
            let mut q = soft_assign(&z, &centroids, cfg.student_alpha)?;
            let labels_now = hard_labels(&q);
            let mut counts = vec![0usize; k];
            labels_now.iter().for_each(|&c| counts[c] += 1);
            let mut reseeded = false;
            for c in 0..k {
                empty_streak[c] = if counts[c] == 0 { empty_streak[c] + 1 } else { 0 };
                if empty_streak[c] >= cfg.degenerate_patience {
                    reseed_farthest(&z, &mut centroids, &labels_now, c);
                    log.events.push(format!("epoch {epoch}: reseeded empty cluster {c}"));
                    empty_streak[c] = 0;
                    reseeded = true;
                }
            }
            if reseeded {
                q = soft_assign(&z, &centroids, cfg.student_alpha)?;
            }
            p = match target_distribution(&q) {
                Ok(p) => p,
                Err(DiecError::DegenerateCluster { cluster }) => {
                    reseed_farthest(&z, &mut centroids, &labels_now, cluster);
                    log.events.push(format!("epoch {epoch}: reseeded zero-mass cluster {cluster}"));
                    q = soft_assign(&z, &centroids, cfg.student_alpha)?;
                    target_distribution(&q)?
                }
                Err(e) => return Err(e),
            };
            let labels_now = hard_labels(&q);
            let changed = refresh_labels.as_ref().map(|prev| label_change(prev, &labels_now));
            refresh_labels = Some(labels_now);
            q_cache = q;
            if epoch > 0 && changed.is_some_and(|c| c < cfg.stop_tol) {
                log.early_stopped = true;
                log.events.push(format!("epoch {epoch}: label change below tolerance, stopping"));
                break;
            }
        }

        let mut brng = rng.substream_path(&[BATCH_STREAM, epoch as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        brng.shuffle(&mut order);
        let (mut sum_re, mut sum_kl, mut sum_gr, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let x0 = data.select_rows(chunk);
            let noise = Tensor::new(x0.shape().to_vec(), brng.normal_vec(x0.numel()))?;
            let t_r = 1 + brng.below(sched.steps());
            let eps_r = Tensor::new(x0.shape().to_vec(), brng.normal_vec(x0.numel()))?;

            let mut tape = Tape::<f32>::new();
            let mut mb = ParamBinder::new(model.params(), trainable);
            let mut hb = ParamBinder::new(head.params(), true);
            let xt = forward_noising(&x0, readout.t, &noise, sched)?;
            let xv = tape.constant(xt.shape().to_vec(), xt.into_data())?;
            let out = model.forward_on_tape(&mut tape, &mut mb, xv, &vec![readout.t; b], Some(readout.tap))?;
            let act = out.taps[&readout.tap];
            let e = match readout.pooling {
                Pooling::Average => tape.mean_spatial(act)?,
                Pooling::Flatten => tape.reshape(act, vec![b, head.dim()])?,
            };
            let e = if readout.scale != 1.0 { tape.scale(e, readout.scale) } else { e };
            let z = head.on_tape(&mut tape, &mut hb, e)?;
            let mu = tape.param(vec![k, head.dim()], to_f32(&centroids))?;
            let q = tape.student_t(z, mu, cfg.student_alpha)?;
            let p_rows: Vec<f32> = chunk.iter().flat_map(|&i| p.row(i).iter().map(|&v| v as f32)).collect();
            let l_kl = tape.kl_to_target(q, p_rows)?;
            let terms: Vec<Vec<NeighborTerm<f32>>> = chunk
                .iter()
                .map(|&i| {
                    graph.neighbors[i]
                        .iter()
                        .zip(&graph.weights[i])
                        .map(|(&j, &s)| NeighborTerm { weight: s as f32, row: q_cache.row(j).iter().map(|&v| v as f32).collect() })
                        .collect()
                })
                .collect();
            let l_gr = tape.graph_smooth(q, terms)?;
            let mut parts = vec![(l_kl, cfg.alpha_kl), (l_gr, cfg.beta_gr)];
            let lre_on_tape = cfg.use_lre && trainable;
            let l_re_val = if lre_on_tape {
                let l_re = denoise_loss_on_tape(model, &mut tape, &mut mb, &x0, &vec![t_r; b], &eps_r, sched)?;
                parts.push((l_re, 1.0));
                tape.scalar(l_re) as f64
            } else {
                let xr = forward_noising_rows(&x0, &vec![t_r; b], &eps_r, sched)?;
                let pred = model.predict_eps(&xr, &vec![t_r; b])?;
                pred.data().iter().zip(eps_r.data()).map(|(&a, &c)| ((a - c) as f64).powi(2)).sum::<f64>() / pred.numel() as f64
            };
            let total = tape.weighted_sum(&parts)?;
            if !(tape.scalar(total) as f64).is_finite() {
                return Err(DiecError::Singular(format!("non-finite loss at epoch {epoch}")));
            }
            sum_re += l_re_val;
            sum_kl += tape.scalar(l_kl) as f64;
            sum_gr += tape.scalar(l_gr) as f64;
            batches += 1;

            let qv = tape.value(q).to_vec();
            for (r, &i) in chunk.iter().enumerate() {
                for c in 0..k {
                    q_cache[(i, c)] = qv[r * k + c] as f64;
                }
            }
            let grads = tape.backward(total)?;
            let model_bound: Vec<_> = mb.bound().collect();
            let head_bound: Vec<_> = hb.bound().collect();
            drop(mb);
            drop(hb);
            if trainable {
                opt_b.begin_step();
                apply_gradients(model, &model_bound, &grads, &mut opt_b, cfg.lr_backbone, 0);
            }
            opt_h.begin_step();
            for (i, v) in head_bound {
                if let Some(g) = grads.get(v) {
                    opt_h.update(i, head.params_mut().tensor_mut(i).data_mut(), g, cfg.lr_head);
                }
            }
            if let Some(g) = grads.get(mu) {
                opt_mu.begin_step();
                let mut flat_mu = to_f32(&centroids);
                opt_mu.update(0, &mut flat_mu, g, cfg.lr_centroids);
                centroids = Matrix::from_vec(k, head.dim(), flat_mu.into_iter().map(|v| v as f64).collect())?;
            }
        }

        if cfg.gamma_en > 0.0 {
            graph = update_affinity(&graph, &q_cache, cfg.beta_gr, cfg.gamma_en)?;
        }
        let (_, en) = graph_losses(&q_cache, &graph)?;
        let now = hard_labels(&q_cache);
        let batches = batches.max(1) as f64;
        log.epochs.push(EpochRecord {
            epoch,
            l_re: sum_re / batches,
            l_kl: sum_kl / batches,
            l_gr: sum_gr / batches,
            l_en: en / n as f64,
            metrics: metrics_of(&now)?,
            label_change: label_change(&epoch_labels, &now),
            denoise_eval: fixed_eval_denoise_loss(model, data, sched, &eval_rng)?,
        });
        epoch_labels = now;
    }

    let z = embed_mean(model, head, data, readout, cfg.trials, sched, &rng.substream(FINAL_STREAM))?;
    let q = soft_assign(&z, &centroids, cfg.student_alpha)?;
    let p = target_distribution(&q).unwrap_or_else(|_| q.clone());
    let final_labels = hard_labels(&q);
    log.final_metrics = metrics_of(&final_labels)?;
    Ok((ClusterState { readout, centroids, q, p, labels: final_labels, alpha: cfg.student_alpha }, log))
}

/// `1 / sqrt(mean_i |z_i - z̄|²)`; 1 when all rows coincide.
pub fn unit_rms_scale(z: &Matrix) -> Result<f64> {
    let n = z.rows();
    if n == 0 {
        return Err(DiecError::param("no embeddings"));
    }
    let mut mean = vec![0.0; z.cols()];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v / n as f64;
        }
    }
    let ms = (0..n).map(|i| z.row(i).iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>() / n as f64;
    Ok(if ms > 0.0 { 1.0 / ms.sqrt() } else { 1.0 })
}

/// Moves centroid `c` onto the embedding farthest from its assigned centroid.
fn reseed_farthest(z: &Matrix, centroids: &mut Matrix, labels: &[usize], c: usize) {
    let dist = |i: usize| -> f64 { z.row(i).iter().zip(centroids.row(labels[i])).map(|(a, b)| (a - b) * (a - b)).sum() };
    let mut far = 0;
    for i in 1..z.rows() {
        if dist(i) > dist(far) {
            far = i;
        }
    }
    let row = z.row(far).to_vec();
    centroids.row_mut(c).copy_from_slice(&row);
}

/// A fresh head sized for `readout`.
pub fn new_head(model: &DenoiserModel, readout: Readout, rng: &Rng) -> ResidualHead {
    ResidualHead::new(readout.dim(model), &mut rng.substream(HEAD_STREAM))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::UNetConfig;

    fn setup() -> (DenoiserModel, NoiseSchedule, Tensor, Vec<usize>) {
        let cfg = UNetConfig { widths: [4, 8, 8, 8], ..UNetConfig::default() };
        let m = DenoiserModel::new(cfg, &mut Rng::new(1)).unwrap();
        let sched = NoiseSchedule::linear(40, 1e-4, 0.02).unwrap();
        let mut r = Rng::new(2);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..32 {
            let c = i % 2;
            labels.push(c);
            for p in 0..256 {
                let base = if (p % 16 < 8) == (c == 0) { 0.7 } else { -0.7 };
                data.push((base + 0.2 * r.normal()) as f32);
            }
        }
        (m, sched, Tensor::new(vec![32, 1, 16, 16], data).unwrap(), labels)
    }

    fn quick_cfg() -> DiecConfig {
        DiecConfig {
            trials: 2,
            target_interval: 2,
            max_epochs: 4,
            knn: 4,
            batch_size: 16,
            kmeans: KMeansConfig { restarts: 3, max_iter: 100 },
            ..DiecConfig::default()
        }
    }

    fn readout() -> Readout {
        Readout::new(Tap::D2, 5, Pooling::Average)
    }

    #[test]
    fn random_t_loss_with_zero_head_is_unit() {
        let (m, sched, data, _) = setup();
        let mut r = Rng::new(3);
        let l = denoise_loss_random_t(&data, &sched, &mut r, |x, ts| m.predict_eps(x, ts)).unwrap();
        assert!((0.9..=1.1).contains(&l), "{l}");
    }

    #[test]
    fn random_t_loss_with_oracle_is_zero() {
        let (_, sched, data, _) = setup();
        let mut r = Rng::new(3);
        let l = denoise_loss_random_t(&data, &sched, &mut r, |x, ts| {
            let t = ts[0];
            let (a, s) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
            let eps = x.data().iter().zip(data.data()).map(|(&xt, &x0)| ((xt as f64 - a * x0 as f64) / s) as f32).collect();
            Tensor::new(x.shape().to_vec(), eps)
        })
        .unwrap();
        assert!(l < 1e-6, "{l}");
    }

    #[test]
    fn single_trial_init_equals_kmeans_on_features() {
        let (m, sched, data, _) = setup();
        let head = ResidualHead::zeros(8);
        let rng = Rng::new(4);
        let (c, labels) = init_centroids(&m, &head, &data, readout(), 1, 2, &sched, &KMeansConfig::default(), &rng).unwrap();
        let f = crate::diffusion::features::extract_features(&m, &data, Tap::D2, 5, 1, &sched, Pooling::Average, &rng.substream(0)).unwrap();
        let res = kmeans(&f.embeddings, 2, &KMeansConfig::default(), &rng.substream(1)).unwrap();
        assert_eq!(labels, res.assignments);
        for (a, b) in c.data().iter().zip(res.centroids.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_backbone_keeps_theta_bit_identical() {
        let (mut m, sched, data, labels) = setup();
        let before = m.params().clone();
        let mut head = new_head(&m, readout(), &Rng::new(5));
        let head_before = head.clone();
        let cfg = DiecConfig { freeze_backbone: true, beta_gr: 0.0, gamma_en: 0.0, stop_tol: 0.0, ..quick_cfg() };
        let setup = TrainSetup { data: &data, labels: Some(&labels), sched: &sched, readout: readout(), k: 2 };
        let (state, log) = train(&mut m, &mut head, &setup, &cfg, &Rng::new(6)).unwrap();
        assert_eq!(m.params(), &before);
        assert_ne!(head, head_before);
        assert_eq!(log.epochs.len(), 4);
        assert!(log.epochs.iter().all(|r| r.denoise_eval == log.initial_denoise_eval));
        for i in 0..32 {
            assert!((state.q.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!((state.p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weights_keep_centroids_static() {
        let (mut m, sched, data, _) = setup();
        let mut head = new_head(&m, readout(), &Rng::new(5));
        let cfg = DiecConfig { alpha_kl: 0.0, beta_gr: 0.0, gamma_en: 0.0, max_epochs: 2, standardize: false, ..quick_cfg() };
        let setup = TrainSetup { data: &data, labels: None, sched: &sched, readout: readout(), k: 2 };
        let (c0, _) = init_centroids(&m, &head, &data, readout(), 2, 2, &sched, &cfg.kmeans, &Rng::new(7).substream(PHASE1_STREAM)).unwrap();
        let before = m.params().clone();
        let (state, _) = train(&mut m, &mut head, &setup, &cfg, &Rng::new(7)).unwrap();
        assert_eq!(state.centroids, Matrix::from_vec(2, 8, to_f32(&c0).into_iter().map(|v| v as f64).collect()).unwrap());
        assert_ne!(m.params(), &before);
    }

    #[test]
    fn training_is_deterministic() {
        let (m0, sched, data, labels) = setup();
        let run = || {
            let mut m = m0.clone();
            let mut head = new_head(&m, readout(), &Rng::new(5));
            let setup = TrainSetup { data: &data, labels: Some(&labels), sched: &sched, readout: readout(), k: 2 };
            train(&mut m, &mut head, &setup, &quick_cfg(), &Rng::new(8)).unwrap()
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_eq!(la.to_csv(), lb.to_csv());
    }

    #[test]
    fn bad_cluster_count_rejected() {
        let (mut m, sched, data, _) = setup();
        let mut head = new_head(&m, readout(), &Rng::new(5));
        let setup = TrainSetup { data: &data, labels: None, sched: &sched, readout: readout(), k: 1 };
        assert!(matches!(train(&mut m, &mut head, &setup, &quick_cfg(), &Rng::new(1)), Err(DiecError::Config(_))));
    }
}
