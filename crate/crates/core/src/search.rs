//! Two-stage search for the clustering-optimal layer (COL) and timestep (COT).

use serde::{Deserialize, Serialize};

use crate::cluster::{align_embeddings, kmeans, layer_score_top_rho, scott_score, KMeansConfig, ScoreGrid};
use crate::diffusion::features::{extract_features, extract_features_multi, Pooling};
use crate::diffusion::{DenoiserModel, NoiseSchedule, Tap};
use crate::error::{DiecError, Result};
use crate::metrics::hungarian_acc;
use crate::numeric::smooth::online_centered_tail;
use crate::numeric::{moving_average_centered, Rng, Tensor};

const SUBSET_STREAM: u64 = 0;
const STAGE1_STREAM: u64 = 1;
const STAGE2_STREAM: u64 = 2;
const LABELED_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Largest timestep searched.
    pub t_max: usize,
    pub stride: usize,
    /// Subset size `m`.
    pub subset: usize,
    /// Noise trials `R` per feature.
    pub trials: usize,
    /// Requested PCA dimension for stage-1 alignment.
    pub align_dim: usize,
    pub window: usize,
    pub rho: f64,
    pub patience: usize,
    pub seed: u64,
    pub pooling: Pooling,
    pub kmeans: KMeansConfig,
    pub taps: Vec<Tap>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            t_max: 200,
            stride: 5,
            subset: 256,
            trials: 4,
            align_dim: 32,
            window: 5,
            rho: 0.2,
            patience: 5,
            seed: 0,
            pooling: Pooling::Average,
            kmeans: KMeansConfig::default(),
            taps: Tap::ALL.to_vec(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        let fail = |m: &str| Err(DiecError::Config(m.to_string()));
        if self.stride < 1 {
            return fail("stride must be at least 1");
        }
        if self.t_max < 1 {
            return fail("t_max must be at least 1");
        }
        if self.subset < k + 1 {
            return fail("subset size must exceed the cluster count");
        }
        if self.trials < 1 {
            return fail("trials must be at least 1");
        }
        if self.window % 2 == 0 {
            return fail("smoothing window must be odd");
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return fail("rho must lie in (0, 1]");
        }
        if self.patience < 1 {
            return fail("patience must be at least 1");
        }
        if self.align_dim < 1 {
            return fail("alignment dimension must be at least 1");
        }
        if self.taps.is_empty() {
            return fail("no candidate taps");
        }
        Ok(())
    }

    /// `1, 1 + stride, ...` up to `t_max`.
    pub fn timesteps(&self, sched: &NoiseSchedule) -> Result<Vec<usize>> {
        if self.t_max > sched.steps() {
            return Err(DiecError::Config(format!("t_max {} exceeds schedule length {}", self.t_max, sched.steps())));
        }
        Ok((1..=self.t_max).step_by(self.stride.max(1)).collect())
    }
}

/// Seeded subset of `m` dataset indices, in ascending order.
pub fn draw_subset(n: usize, cfg: &SearchConfig) -> Result<Vec<usize>> {
    if cfg.subset > n {
        return Err(DiecError::param(format!("subset size {} exceeds dataset size {n}", cfg.subset)));
    }
    let mut idx = Rng::new(cfg.seed).substream(SUBSET_STREAM).sample_indices(n, cfg.subset);
    idx.sort_unstable();
    Ok(idx)
}

/// Common stage-1 alignment dimension: the requested one, capped by the
/// narrowest tap and by `m - 1`.
pub fn common_align_dim(model: &DenoiserModel, cfg: &SearchConfig, m: usize) -> Result<usize> {
    let mut d = cfg.align_dim.min(m.saturating_sub(1));
    for &tap in &cfg.taps {
        let shape = model.config().tap_shape(tap);
        let width = match cfg.pooling {
            Pooling::Average => shape.0,
            Pooling::Flatten => shape.0 * shape.1 * shape.2,
        };
        d = d.min(width);
    }
    if d == 0 {
        return Err(DiecError::Config("alignment dimension collapses to zero".into()));
    }
    Ok(d)
}

/// Aligned, smoothed Scott Score grid over `cfg.taps` x timesteps on `x`.
pub fn score_grid(model: &DenoiserModel, sched: &NoiseSchedule, x: &Tensor, k: usize, cfg: &SearchConfig) -> Result<ScoreGrid> {
    let timesteps = cfg.timesteps(sched)?;
    let d = common_align_dim(model, cfg, x.rows())?;
    let root = Rng::new(cfg.seed).substream(STAGE1_STREAM);
    let mut raw = vec![Vec::with_capacity(timesteps.len()); cfg.taps.len()];
    for &t in &timesteps {
        let feats = extract_features_multi(model, x, &cfg.taps, t, cfg.trials, sched, cfg.pooling, &root.substream_path(&[t as u64, 0]))?;
        for (row, &tap) in cfg.taps.iter().enumerate() {
            let aligned = align_embeddings(&feats[&tap].embeddings, d)?;
            let krng = root.substream_path(&[t as u64, 1, tap.position() as u64]);
            raw[row].push(scott_score(&aligned, k, &cfg.kmeans, &krng)?);
        }
    }
    ScoreGrid::new(cfg.taps.clone(), timesteps, raw, cfg.window, Some(d), cfg.kmeans)
}

/// Layer with the largest top-rho mean of its smoothed row; ties go to the
/// shallowest tap.
pub fn choose_col(grid: &ScoreGrid, rho: f64) -> Result<(Tap, Vec<(Tap, f64)>)> {
    let mut scores = Vec::with_capacity(grid.taps.len());
    for (i, &tap) in grid.taps.iter().enumerate() {
        scores.push((tap, layer_score_top_rho(&grid.smoothed[i], rho)?));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by_key(|&i| scores[i].0.position());
    let mut best = order[0];
    for &i in &order[1..] {
        if scores[i].1 > scores[best].1 {
            best = i;
        }
    }
    Ok((scores[best].0, scores))
}

pub fn select_col(model: &DenoiserModel, sched: &NoiseSchedule, data: &Tensor, k: usize, cfg: &SearchConfig) -> Result<(Tap, ScoreGrid)> {
    cfg.validate(k)?;
    let subset = data.select_rows(&draw_subset(data.rows(), cfg)?);
    let grid = score_grid(model, sched, &subset, k, cfg)?;
    let (col, _) = choose_col(&grid, cfg.rho)?;
    Ok((col, grid))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CotTrace {
    pub timesteps: Vec<usize>,
    pub raw: Vec<f64>,
    /// Smoothed value of each position as seen when it was the newest one.
    pub online: Vec<f64>,
    /// Offline centered average over the evaluated prefix.
    pub smoothed: Vec<f64>,
    /// Leading positions of `smoothed` eligible for the argmax.
    pub eligible: usize,
    pub cot: usize,
    pub early_stopped: bool,
}

/// Ascending scan with online smoothing and patience-based stopping.
/// `score(t)` is called once per evaluated timestep.
pub fn scan_cot<F>(timesteps: &[usize], window: usize, patience: usize, mut score: F) -> Result<CotTrace>
where
    F: FnMut(usize) -> Result<f64>,
{
    if timesteps.is_empty() {
        return Err(DiecError::param("no timesteps to scan"));
    }
    let mut raw = Vec::new();
    let mut online = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut early_stopped = false;
    for (i, &t) in timesteps.iter().enumerate() {
        raw.push(score(t)?);
        let s = online_centered_tail(&raw, window)?;
        online.push(s);
        if s > best {
            best = s;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= patience && i + 1 < timesteps.len() {
            early_stopped = true;
            break;
        }
    }
    let smoothed = moving_average_centered(&raw, window)?;
    // After an early stop the last window/2 positions have windows cut short
    // by the stop rather than by the end of the grid; they are not eligible.
    let eligible = if early_stopped && raw.len() > window / 2 { raw.len() - window / 2 } else { raw.len() };
    let mut arg = 0;
    for (i, &v) in smoothed[..eligible].iter().enumerate() {
        if v > smoothed[arg] {
            arg = i;
        }
    }
    let evaluated = timesteps[..raw.len()].to_vec();
    Ok(CotTrace { cot: evaluated[arg], timesteps: evaluated, raw, online, smoothed, eligible, early_stopped })
}

/// Stage 2 on `x` (already the search subset) at the fixed `col`.
pub fn select_cot(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    x: &Tensor,
    col: Tap,
    k: usize,
    cfg: &SearchConfig,
) -> Result<CotTrace> {
    let timesteps = cfg.timesteps(sched)?;
    let root = Rng::new(cfg.seed).substream(STAGE2_STREAM);
    scan_cot(&timesteps, cfg.window, cfg.patience, |t| {
        let f = extract_features(model, x, col, t, cfg.trials, sched, cfg.pooling, &root.substream_path(&[t as u64, 0]))?;
        scott_score(&f.embeddings, k, &cfg.kmeans, &root.substream_path(&[t as u64, 1]))
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchCounters {
    /// Per-sample denoiser forward passes actually executed.
    pub forward_passes: u64,
    /// Per-sample tap evaluations: `m * R * (|T| * |layers| + stage-2 timesteps)`.
    pub tap_evaluations: u64,
    pub stage1_timesteps: usize,
    pub stage2_timesteps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub col: Tap,
    pub cot: usize,
    pub grid: ScoreGrid,
    pub layer_scores: Vec<(Tap, f64)>,
    pub trace: CotTrace,
    pub subset: Vec<usize>,
    pub counters: SearchCounters,
    pub config: SearchConfig,
}

pub fn run_optimal_search(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    data: &Tensor,
    k: usize,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    cfg.validate(k)?;
    let subset = draw_subset(data.rows(), cfg)?;
    let x = data.select_rows(&subset);
    let before = model.forward_count();
    let grid = score_grid(model, sched, &x, k, cfg)?;
    let (col, layer_scores) = choose_col(&grid, cfg.rho)?;
    let trace = select_cot(model, sched, &x, col, k, cfg)?;
    let per_t = (x.rows() * cfg.trials) as u64;
    let counters = SearchCounters {
        forward_passes: model.forward_count() - before,
        tap_evaluations: per_t * (grid.timesteps.len() * cfg.taps.len() + trace.timesteps.len()) as u64,
        stage1_timesteps: grid.timesteps.len(),
        stage2_timesteps: trace.timesteps.len(),
    };
    Ok(SearchResult { col, cot: trace.cot, grid, layer_scores, trace, subset, counters, config: cfg.clone() })
}

/// Labeled k-means accuracy for every tap x timestep on native features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledGrid {
    pub taps: Vec<Tap>,
    pub timesteps: Vec<usize>,
    pub acc: Vec<Vec<f64>>,
}

impl LabeledGrid {
    pub fn acc_at(&self, tap: Tap, t: usize) -> Option<f64> {
        let i = self.taps.iter().position(|&x| x == tap)?;
        let j = self.timesteps.iter().position(|&x| x == t)?;
        Some(self.acc[i][j])
    }

    /// Best cell; ties go to the smaller timestep, then the shallower tap.
    pub fn best(&self) -> (Tap, usize, f64) {
        let mut best = (self.taps[0], self.timesteps[0], f64::NEG_INFINITY);
        for (j, &t) in self.timesteps.iter().enumerate() {
            let mut order: Vec<usize> = (0..self.taps.len()).collect();
            order.sort_by_key(|&i| self.taps[i].position());
            for i in order {
                if self.acc[i][j] > best.2 {
                    best = (self.taps[i], t, self.acc[i][j]);
                }
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for t in &self.timesteps {
            out.push_str(&format!(",{t}"));
        }
        out.push('\n');
        for (i, tap) in self.taps.iter().enumerate() {
            out.push_str(tap.name());
            for v in &self.acc[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// k-means accuracy against ground truth at one cell.
#[allow(clippy::too_many_arguments)]
pub fn labeled_acc(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    x: &Tensor,
    labels: &[usize],
    tap: Tap,
    t: usize,
    k: usize,
    cfg: &SearchConfig,
) -> Result<f64> {
    let root = Rng::new(cfg.seed).substream(LABELED_STREAM);
    let f = extract_features(model, x, tap, t, cfg.trials, sched, cfg.pooling, &root.substream_path(&[t as u64, 0]))?;
    let res = kmeans(&f.embeddings, k, &cfg.kmeans, &root.substream_path(&[t as u64, 1, tap.position() as u64]))?;
    hungarian_acc(labels, &res.assignments)
}

/// Exhaustive labeled grid over `cfg.taps` and the search timesteps; every
/// timestep extracts all taps in one pass.
pub fn labeled_grid(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    x: &Tensor,
    labels: &[usize],
    k: usize,
    cfg: &SearchConfig,
) -> Result<LabeledGrid> {
    if labels.len() != x.rows() {
        return Err(DiecError::shape("label count differs from sample count"));
    }
    let timesteps = cfg.timesteps(sched)?;
    let root = Rng::new(cfg.seed).substream(LABELED_STREAM);
    let mut acc = vec![Vec::with_capacity(timesteps.len()); cfg.taps.len()];
    for &t in &timesteps {
        let feats = extract_features_multi(model, x, &cfg.taps, t, cfg.trials, sched, cfg.pooling, &root.substream_path(&[t as u64, 0]))?;
        for (row, &tap) in cfg.taps.iter().enumerate() {
            let res = kmeans(&feats[&tap].embeddings, k, &cfg.kmeans, &root.substream_path(&[t as u64, 1, tap.position() as u64]))?;
            acc[row].push(hungarian_acc(labels, &res.assignments)?);
        }
    }
    Ok(LabeledGrid { taps: cfg.taps.clone(), timesteps, acc })
}
