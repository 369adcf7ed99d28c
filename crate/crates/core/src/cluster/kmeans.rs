use serde::{Deserialize, Serialize};

use crate::error::{DiecError, Result};
use crate::numeric::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { restarts: 10, max_iter: 300 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_seed(e: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = e.rows();
    let mut c = Matrix::zeros(k, e.cols());
    c.row_mut(0).copy_from_slice(e.row(rng.below(n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(e.row(i), c.row(0))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.below(n)
        };
        c.row_mut(j).copy_from_slice(e.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(e.row(i), c.row(j)));
        }
    }
    c
}

/// Inertia of `e` against `centroids` under the given assignments.
pub fn inertia(e: &Matrix, assignments: &[usize], centroids: &Matrix) -> f64 {
    (0..e.rows()).map(|i| sq_dist(e.row(i), centroids.row(assignments[i]))).sum()
}

fn lloyd(e: &Matrix, mut centroids: Matrix, max_iter: usize) -> KMeansResult {
    let (n, d, k) = (e.rows(), e.cols(), centroids.rows());
    let mut assignments = vec![usize::MAX; n];
    let mut last = f64::INFINITY;
    let mut iterations = 0;
    let tol = |v: f64| 1e-9 * (1.0 + v.abs());
    for _ in 0..max_iter {
        iterations += 1;
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (c, dd) = nearest(e.row(i), &centroids);
            dist[i] = dd;
            if c != assignments[i] {
                assignments[i] = c;
                changed = true;
            }
        }
        let assigned: f64 = dist.iter().sum();
        assert!(assigned <= last + tol(last), "k-means assignment step raised inertia");
        if !changed {
            last = assigned;
            break;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (s, v) in sums.row_mut(assignments[i]).iter_mut().zip(e.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let row: Vec<f64> = sums.row(c).iter().map(|s| s / counts[c] as f64).collect();
                centroids.row_mut(c).copy_from_slice(&row);
            } else {
                let far = (0..n).max_by(|&a, &b| dist[a].total_cmp(&dist[b])).expect("non-empty");
                centroids.row_mut(c).copy_from_slice(e.row(far));
                dist[far] = 0.0;
            }
        }
        let updated = inertia(e, &assignments, &centroids);
        assert!(updated <= assigned + tol(assigned), "k-means update step raised inertia");
        last = updated;
    }
    let inertia = inertia(e, &assignments, &centroids);
    KMeansResult { centroids, assignments, inertia: inertia.min(last), iterations }
}

/// Best-inertia k-means over `restarts` k-means++ seedings.
pub fn kmeans(e: &Matrix, k: usize, cfg: &KMeansConfig, rng: &Rng) -> Result<KMeansResult> {
    if k == 0 || k > e.rows() {
        return Err(DiecError::param(format!("k-means needs 1 <= K <= N, got K={k}, N={}", e.rows())));
    }
    if cfg.restarts == 0 || cfg.max_iter == 0 {
        return Err(DiecError::param("k-means restarts and max_iter must be positive"));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..cfg.restarts {
        let mut rr = rng.substream(r as u64);
        let seed = plus_plus_seed(e, k, &mut rr);
        let res = lloyd(e, seed, cfg.max_iter);
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    let mut best = best.expect("at least one restart");
    best.inertia = inertia(e, &best.assignments, &best.centroids);
    Ok(best)
}
