use crate::error::{DiecError, Result};
use crate::numeric::tape::{student_t_rows, Q_CLIP};
use crate::numeric::Matrix;

/// Student-t soft assignment of rows of `z` to centroids `mu`.
pub fn soft_assign(z: &Matrix, mu: &Matrix, alpha: f64) -> Result<Matrix> {
    if mu.rows() < 1 {
        return Err(DiecError::param("soft assignment needs at least one centroid"));
    }
    if z.cols() != mu.cols() {
        return Err(DiecError::shape(format!("z has {} columns, centroids {}", z.cols(), mu.cols())));
    }
    if !(alpha > 0.0) {
        return Err(DiecError::param("Student-t degree must be positive"));
    }
    let q = student_t_rows(z.data(), mu.data(), z.rows(), mu.rows(), z.cols(), alpha);
    Matrix::from_vec(z.rows(), mu.rows(), q)
}

/// Sharpened target `p_ik = (q_ik^2 / f_k) / sum_k' (q_ik'^2 / f_k')`.
pub fn target_distribution(q: &Matrix) -> Result<Matrix> {
    let (n, k) = (q.rows(), q.cols());
    let mut f = vec![0.0; k];
    for i in 0..n {
        for (fk, v) in f.iter_mut().zip(q.row(i)) {
            *fk += v;
        }
    }
    if let Some(cluster) = f.iter().position(|&v| v <= 0.0) {
        return Err(DiecError::DegenerateCluster { cluster });
    }
    let mut p = Matrix::zeros(n, k);
    for i in 0..n {
        let row = p.row_mut(i);
        for c in 0..k {
            row[c] = q.row(i)[c] * q.row(i)[c] / f[c];
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(p)
}

/// `sum_i sum_k p_ik log(p_ik / q_ik)` with `q` clipped below at 1e-12.
pub fn kl_loss(p: &Matrix, q: &Matrix) -> Result<f64> {
    if p.rows() != q.rows() || p.cols() != q.cols() {
        return Err(DiecError::shape("KL: P and Q shapes differ"));
    }
    Ok(p.data()
        .iter()
        .zip(q.data())
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / qv.max(Q_CLIP)).ln())
        .sum())
}

/// Row-wise argmax; ties go to the lowest cluster index.
pub fn hard_labels(q: &Matrix) -> Vec<usize> {
    (0..q.rows())
        .map(|i| {
            let row = q.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    #[test]
    fn equidistant_centroids_give_uniform_row() {
        let z = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let mu = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let q = soft_assign(&z, &mu, 1.0).unwrap();
        for &v in q.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_centroid_example() {
        let z = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let mu = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let q = soft_assign(&z, &mu, 1.0).unwrap();
        assert!((q.row(0)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((q.row(0)[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn far_centroid_mass_vanishes_monotonically() {
        let z = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let mut prev = 1.0;
        for scale in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let mu = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, scale]]).unwrap();
            let q = soft_assign(&z, &mu, 1.0).unwrap().row(0)[1];
            let k1 = 1.0 / (1.0 + 0.25);
            let k2 = 1.0 / (1.0 + scale * scale);
            assert!((q - k2 / (k1 + k2)).abs() < 1e-12);
            assert!(q < prev);
            prev = q;
        }
        assert!(prev < 0.01);
    }

    #[test]
    fn zero_centroids_rejected() {
        let z = Matrix::zeros(2, 2);
        assert!(matches!(soft_assign(&z, &Matrix::zeros(0, 2), 1.0), Err(DiecError::Param(_))));
    }

    #[test]
    fn one_hot_rows_are_target_fixpoint() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(target_distribution(&q).unwrap(), q);
    }

    #[test]
    fn hand_evaluated_target() {
        let q = Matrix::from_rows(&[vec![0.6, 0.4], vec![0.4, 0.6]]).unwrap();
        let p = target_distribution(&q).unwrap();
        let a = 0.36 / (0.36 + 0.16);
        assert!((p.row(0)[0] - a).abs() < 1e-12);
        assert!((p.row(0)[0] - 0.6923076923).abs() < 1e-9);
        assert!((p.row(1)[1] - a).abs() < 1e-12);
    }

    #[test]
    fn empty_column_is_degenerate() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(target_distribution(&q), Err(DiecError::DegenerateCluster { cluster: 1 })));
    }

    fn entropy(row: &[f64]) -> f64 {
        row.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum()
    }

    #[test]
    fn target_sharpens_when_masses_equal() {
        let mut r = Rng::new(1);
        for _ in 0..100 {
            // A row and its mirror give equal column masses.
            let a = 0.05 + 0.9 * r.uniform();
            let q = Matrix::from_rows(&[vec![a, 1.0 - a], vec![1.0 - a, a]]).unwrap();
            let p = target_distribution(&q).unwrap();
            for i in 0..2 {
                assert!(entropy(p.row(i)) <= entropy(q.row(i)) + 1e-12);
            }
        }
    }

    #[test]
    fn kl_examples() {
        let q = Matrix::from_rows(&[vec![0.3, 0.7]]).unwrap();
        assert_eq!(kl_loss(&q, &q).unwrap(), 0.0);
        let p = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let q = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!((kl_loss(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_direct_sum() {
        let mut r = Rng::new(2);
        let rand_row = |r: &mut Rng| {
            let v: Vec<f64> = (0..4).map(|_| r.uniform() + 1e-3).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        for _ in 0..50 {
            let p = rand_row(&mut r);
            let q = rand_row(&mut r);
            let mut oracle = 0.0f64;
            for k in 0..4 {
                oracle += p[k] * p[k].ln() - p[k] * q[k].ln();
            }
            let got = kl_loss(&Matrix::from_rows(&[p]).unwrap(), &Matrix::from_rows(&[q]).unwrap()).unwrap();
            assert!((got - oracle).abs() < 1e-10);
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn labels_invariant_under_kernel_rescaling() {
        let mut r = Rng::new(3);
        for _ in 0..20 {
            let z = Matrix::from_vec(10, 3, (0..30).map(|_| r.normal()).collect()).unwrap();
            let mu = Matrix::from_vec(4, 3, (0..12).map(|_| r.normal()).collect()).unwrap();
            let q = soft_assign(&z, &mu, 1.0).unwrap();
            let c = 0.1 + 10.0 * r.uniform();
            let scaled = Matrix::from_vec(10, 4, q.data().iter().map(|v| v * c).collect()).unwrap();
            assert_eq!(hard_labels(&q), hard_labels(&scaled));
        }
    }

    proptest! {
        #[test]
        fn q_and_p_rows_are_stochastic(vals in prop::collection::vec(-3.0f64..3.0, 24), alpha in 0.5f64..4.0) {
            let z = Matrix::from_vec(6, 2, vals[..12].to_vec()).unwrap();
            let mu = Matrix::from_vec(3, 2, vals[12..18].to_vec()).unwrap();
            let q = soft_assign(&z, &mu, alpha).unwrap();
            let p = target_distribution(&q).unwrap();
            for i in 0..6 {
                prop_assert!((q.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(q.row(i).iter().chain(p.row(i)).all(|&v| v >= 0.0));
            }
            prop_assert!(kl_loss(&p, &q).unwrap() >= -1e-12);
        }
    }
}
