use crate::error::{DiecError, Result};
use crate::numeric::Matrix;

/// Row-normalized k-nearest-neighbor affinities.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityGraph {
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
    /// Local bandwidth: mean squared distance to the row's neighbors.
    pub sigma: Vec<f64>,
}

/// Exact k-NN on the rows of `x` (self excluded), Gaussian weights with a
/// per-row bandwidth, renormalized per row. Distance ties go to the lower index.
pub fn build_affinity(x: &Matrix, k: usize) -> Result<AffinityGraph> {
    let n = x.rows();
    if k == 0 || k >= n {
        return Err(DiecError::param(format!("k-NN size must satisfy 1 <= k < N, got k={k}, N={n}")));
    }
    let norms: Vec<f64> = (0..n).map(|i| x.row(i).iter().map(|v| v * v).sum()).collect();
    let mut neighbors = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut dist = vec![0.0; n];
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..n {
            dist[j] = if j == i {
                f64::INFINITY
            } else {
                let dot: f64 = xi.iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
                (norms[i] + norms[j] - 2.0 * dot).max(0.0)
            };
        }
        let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        idx.select_nth_unstable_by(k - 1, |&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        idx.truncate(k);
        idx.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        let s = idx.iter().map(|&j| dist[j]).sum::<f64>() / k as f64;
        let raw: Vec<f64> = idx.iter().map(|&j| if s > 0.0 { (-dist[j] / s).exp() } else { 1.0 }).collect();
        let total: f64 = raw.iter().sum();
        weights.push(raw.into_iter().map(|w| w / total).collect());
        neighbors.push(idx);
        sigma.push(s);
    }
    Ok(AffinityGraph { neighbors, weights, sigma })
}

fn pair_distance(q: &Matrix, i: usize, j: usize) -> f64 {
    q.row(i).iter().zip(q.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `(L_Gr, L_En)` summed over all rows and neighbors.
pub fn graph_losses(q: &Matrix, s: &AffinityGraph) -> Result<(f64, f64)> {
    if s.neighbors.len() != q.rows() {
        return Err(DiecError::shape("affinity graph and Q disagree on N"));
    }
    let mut gr = 0.0;
    let mut en = 0.0;
    for (i, (nb, w)) in s.neighbors.iter().zip(&s.weights).enumerate() {
        for (&j, &sij) in nb.iter().zip(w) {
            gr += sij * pair_distance(q, i, j);
            if sij > 0.0 {
                en += sij * sij.ln();
            }
        }
    }
    Ok((gr, en))
}

/// Per-row value of `beta * sum s d + gamma * sum s log s`.
pub fn row_objective(weights: &[f64], d: &[f64], beta: f64, gamma: f64) -> f64 {
    weights
        .iter()
        .zip(d)
        .map(|(&s, &dd)| beta * s * dd + if s > 0.0 { gamma * s * s.ln() } else { 0.0 })
        .sum()
}

/// Closed-form simplex minimizer per row: `s_ij ∝ exp(-beta d_ij / gamma)`
/// over the existing neighbor sets.
pub fn update_affinity(s: &AffinityGraph, q: &Matrix, beta: f64, gamma: f64) -> Result<AffinityGraph> {
    if !(gamma > 0.0) {
        return Err(DiecError::param("entropy weight must be positive for the closed-form affinity update"));
    }
    if beta < 0.0 {
        return Err(DiecError::param("graph weight must be non-negative"));
    }
    if s.neighbors.len() != q.rows() {
        return Err(DiecError::shape("affinity graph and Q disagree on N"));
    }
    let mut out = s.clone();
    for (i, nb) in s.neighbors.iter().enumerate() {
        let d: Vec<f64> = nb.iter().map(|&j| pair_distance(q, i, j)).collect();
        let logits: Vec<f64> = d.iter().map(|dd| -beta * dd / gamma).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = e.iter().sum();
        let new: Vec<f64> = e.into_iter().map(|v| v / total).collect();
        let before = row_objective(&s.weights[i], &d, beta, gamma);
        let after = row_objective(&new, &d, beta, gamma);
        assert!(after <= before + 1e-12 * (1.0 + before.abs()), "affinity update raised the row objective");
        out.weights[i] = new;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn gauss(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = Rng::new(seed);
        Matrix::from_vec(n, d, (0..n * d).map(|_| r.normal()).collect()).unwrap()
    }

    fn rows_stochastic(g: &AffinityGraph) {
        for w in &g.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn duplicates_get_unit_raw_weight() {
        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let g = build_affinity(&x, 2).unwrap();
        assert_eq!(g.neighbors[0][0], 1);
        assert_eq!(g.neighbors[1][0], 0);
        // sigma_0 = (0 + 25) / 2, raw weights (1, exp(-2)).
        let expect = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((g.weights[0][0] - expect).abs() < 1e-12);
        rows_stochastic(&g);
    }

    #[test]
    fn single_neighbor_has_unit_weight() {
        let g = build_affinity(&gauss(10, 3, 1), 1).unwrap();
        assert!(g.weights.iter().all(|w| w == &vec![1.0]));
    }

    #[test]
    fn k_too_large_rejected() {
        assert!(matches!(build_affinity(&gauss(5, 2, 1), 5), Err(DiecError::Param(_))));
    }

    #[test]
    fn neighbors_match_all_pairs_oracle() {
        let x = gauss(50, 6, 2);
        let g = build_affinity(&x, 7).unwrap();
        for i in 0..50 {
            let mut all: Vec<(f64, usize)> = (0..50)
                .filter(|&j| j != i)
                .map(|j| (x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut want: Vec<usize> = all[..7].iter().map(|p| p.1).collect();
            let mut got = g.neighbors[i].clone();
            want.sort();
            got.sort();
            assert_eq!(got, want);
        }
        rows_stochastic(&g);
    }

    fn uniform_q(n: usize) -> Matrix {
        Matrix::from_vec(n, 3, vec![1.0 / 3.0; n * 3]).unwrap()
    }

    #[test]
    fn constant_q_has_zero_graph_loss() {
        let g = build_affinity(&gauss(12, 2, 3), 4).unwrap();
        assert_eq!(graph_losses(&uniform_q(12), &g).unwrap().0, 0.0);
    }

    #[test]
    fn uniform_weights_give_negative_log_k_entropy() {
        let mut g = build_affinity(&gauss(12, 2, 3), 4).unwrap();
        for w in &mut g.weights {
            *w = vec![0.25; 4];
        }
        let (_, en) = graph_losses(&uniform_q(12), &g).unwrap();
        assert!((en / 12.0 + 4f64.ln()).abs() < 1e-12);
    }

    fn random_q(n: usize, k: usize, seed: u64) -> Matrix {
        let mut r = Rng::new(seed);
        let mut q = Matrix::zeros(n, k);
        for i in 0..n {
            let v: Vec<f64> = (0..k).map(|_| r.uniform()).collect();
            let s: f64 = v.iter().sum();
            for c in 0..k {
                q[(i, c)] = v[c] / s;
            }
        }
        q
    }

    #[test]
    fn graph_losses_match_triple_loop() {
        let x = gauss(15, 3, 4);
        let g = build_affinity(&x, 4).unwrap();
        let q = random_q(15, 3, 5);
        let (mut gr, mut en) = (0.0, 0.0);
        for i in 0..15 {
            for (jj, &j) in g.neighbors[i].iter().enumerate() {
                let s = g.weights[i][jj];
                for k in 0..3 {
                    gr += s * (q[(i, k)] - q[(j, k)]).powi(2);
                }
                en += s * s.ln();
            }
        }
        let (a, b) = graph_losses(&q, &g).unwrap();
        assert!((a - gr).abs() < 1e-8 && (b - en).abs() < 1e-8);
    }

    #[test]
    fn equal_distances_and_zero_beta_give_uniform_rows() {
        let g = build_affinity(&gauss(10, 2, 6), 3).unwrap();
        let u = update_affinity(&g, &uniform_q(10), 1.0, 0.5).unwrap();
        let b0 = update_affinity(&g, &random_q(10, 3, 7), 0.0, 0.5).unwrap();
        for w in u.weights.iter().chain(&b0.weights) {
            for &v in w {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        assert_eq!(u.neighbors, g.neighbors);
    }

    #[test]
    fn zero_gamma_rejected() {
        let g = build_affinity(&gauss(10, 2, 6), 3).unwrap();
        assert!(matches!(update_affinity(&g, &uniform_q(10), 1.0, 0.0), Err(DiecError::Param(_))));
    }

    #[test]
    fn update_equals_softmax_and_beats_random_probes() {
        let mut r = Rng::new(8);
        let x = gauss(30, 3, 9);
        let g = build_affinity(&x, 6).unwrap();
        let q = random_q(30, 4, 10);
        let beta = 2.5;
        let u = update_affinity(&g, &q, beta, 1.0).unwrap();
        for i in 0..30 {
            let d: Vec<f64> = g.neighbors[i].iter().map(|&j| pair_distance(&q, i, j)).collect();
            let e: Vec<f64> = d.iter().map(|v| (-beta * v).exp()).collect();
            let z: f64 = e.iter().sum();
            for (a, b) in u.weights[i].iter().zip(&e) {
                assert!((a - b / z).abs() < 1e-9);
            }
            let best = row_objective(&u.weights[i], &d, beta, 1.0);
            for _ in 0..1000 {
                let v: Vec<f64> = (0..6).map(|_| -r.uniform().max(1e-300).ln()).collect();
                let s: f64 = v.iter().sum();
                let probe: Vec<f64> = v.into_iter().map(|x| x / s).collect();
                assert!(best <= row_objective(&probe, &d, beta, 1.0) + 1e-12);
            }
        }
    }
}
