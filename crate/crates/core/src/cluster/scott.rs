use serde::{Deserialize, Serialize};

use crate::cluster::kmeans::{kmeans, KMeansConfig};
use crate::diffusion::Tap;
use crate::error::{DiecError, Result};
use crate::numeric::linalg::DEFAULT_JITTER;
use crate::numeric::{guarded_logdet, moving_average_centered, pca_fit_transform, Matrix, Rng};

/// Within-cluster and between-cluster scatter.
pub fn scatter_matrices(e: &Matrix, assignments: &[usize], centroids: &Matrix) -> Result<(Matrix, Matrix)> {
    let (n, d) = (e.rows(), e.cols());
    if assignments.len() != n {
        return Err(DiecError::shape(format!("{} assignments for {n} rows", assignments.len())));
    }
    if centroids.cols() != d {
        return Err(DiecError::shape(format!("centroids have {} columns, embeddings {d}", centroids.cols())));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= centroids.rows()) {
        return Err(DiecError::shape(format!("assignment {bad} outside {} centroids", centroids.rows())));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(e.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut counts = vec![0usize; centroids.rows()];
    let mut w = Matrix::zeros(d, d);
    let mut diff = vec![0.0; d];
    for i in 0..n {
        let c = assignments[i];
        counts[c] += 1;
        for j in 0..d {
            diff[j] = e.row(i)[j] - centroids.row(c)[j];
        }
        add_outer(&mut w, &diff, 1.0);
    }
    let mut b = Matrix::zeros(d, d);
    for (c, &cnt) in counts.iter().enumerate() {
        if cnt == 0 {
            continue;
        }
        for j in 0..d {
            diff[j] = centroids.row(c)[j] - mean[j];
        }
        add_outer(&mut b, &diff, cnt as f64);
    }
    Ok((w, b))
}

fn add_outer(m: &mut Matrix, v: &[f64], scale: f64) {
    let d = v.len();
    for a in 0..d {
        for b in a..d {
            let x = scale * v[a] * v[b];
            m[(a, b)] += x;
            if b != a {
                m[(b, a)] += x;
            }
        }
    }
}

/// `N (log det T - log det W)` for fixed assignments; the jitter only enters
/// when a scatter matrix is numerically singular.
pub fn scott_score_fixed(e: &Matrix, assignments: &[usize], centroids: &Matrix) -> Result<f64> {
    let (w, b) = scatter_matrices(e, assignments, centroids)?;
    let t = w.add(&b)?;
    if w.max_abs() == 0.0 && t.max_abs() == 0.0 {
        return Err(DiecError::Singular("all embeddings identical".into()));
    }
    let ld_t = guarded_logdet(&t, DEFAULT_JITTER)?;
    let ld_w = guarded_logdet(&w, DEFAULT_JITTER)?;
    Ok(e.rows() as f64 * (ld_t - ld_w))
}

/// Scott Score after k-means with `k` clusters.
pub fn scott_score(e: &Matrix, k: usize, cfg: &KMeansConfig, rng: &Rng) -> Result<f64> {
    if e.rows() <= k {
        return Err(DiecError::param(format!("Scott Score needs N > K, got N={}, K={k}", e.rows())));
    }
    if e.cols() == 0 {
        return Err(DiecError::param("embeddings have zero dimensions"));
    }
    let res = kmeans(e, k, cfg, rng)?;
    scott_score_fixed(e, &res.assignments, &res.centroids)
}

/// Projects to `d` principal components and scales every row to unit length.
pub fn align_embeddings(e: &Matrix, d: usize) -> Result<Matrix> {
    let (_, mut y) = pca_fit_transform(e, d)?;
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(y)
}

/// Mean of the `ceil(rho * len)` largest entries.
pub fn layer_score_top_rho(row: &[f64], rho: f64) -> Result<f64> {
    if row.is_empty() {
        return Err(DiecError::param("empty score row"));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(DiecError::param(format!("rho must lie in (0, 1], got {rho}")));
    }
    let k = ((rho * row.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Raw and smoothed Scott Scores over taps (rows) and timesteps (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    pub taps: Vec<Tap>,
    pub timesteps: Vec<usize>,
    pub raw: Vec<Vec<f64>>,
    pub smoothed: Vec<Vec<f64>>,
    pub aligned: bool,
    pub align_dim: Option<usize>,
    pub window: usize,
    /// How each cell's clustering was obtained.
    pub kmeans: KMeansConfig,
}

impl ScoreGrid {
    pub fn new(
        taps: Vec<Tap>,
        timesteps: Vec<usize>,
        raw: Vec<Vec<f64>>,
        window: usize,
        align_dim: Option<usize>,
        kmeans: KMeansConfig,
    ) -> Result<Self> {
        if raw.len() != taps.len() || raw.iter().any(|r| r.len() != timesteps.len()) {
            return Err(DiecError::shape("score grid dimensions disagree with taps/timesteps"));
        }
        let smoothed = raw.iter().map(|r| moving_average_centered(r, window)).collect::<Result<Vec<_>>>()?;
        Ok(ScoreGrid { taps, timesteps, raw, smoothed, aligned: align_dim.is_some(), align_dim, window, kmeans })
    }

    pub fn row(&self, tap: Tap) -> Option<&[f64]> {
        self.taps.iter().position(|&t| t == tap).map(|i| self.smoothed[i].as_slice())
    }

    /// Rows are taps in network order, columns timesteps.
    pub fn to_csv(&self, smoothed: bool) -> String {
        let mut out = String::from("layer");
        for t in &self.timesteps {
            out.push_str(&format!(",{t}"));
        }
        out.push('\n');
        let data = if smoothed { &self.smoothed } else { &self.raw };
        let mut order: Vec<usize> = (0..self.taps.len()).collect();
        order.sort_by_key(|&i| self.taps[i].position());
        for i in order {
            out.push_str(self.taps[i].name());
            for v in &data[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}
