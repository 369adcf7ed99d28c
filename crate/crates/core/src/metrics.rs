//! External clustering metrics. Used for reporting only.

use serde::{Deserialize, Serialize};

use crate::error::{DiecError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    /// `counts[true][pred]`.
    pub counts: Vec<Vec<u64>>,
    pub true_marginal: Vec<u64>,
    pub pred_marginal: Vec<u64>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn new(y_true: &[usize], y_pred: &[usize]) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(DiecError::shape(format!("label lengths differ: {} vs {}", y_true.len(), y_pred.len())));
        }
        let kt = y_true.iter().max().map_or(0, |m| m + 1);
        let kp = y_pred.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0u64; kp]; kt];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            counts[t][p] += 1;
        }
        let true_marginal = counts.iter().map(|r| r.iter().sum()).collect();
        let pred_marginal = (0..kp).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Ok(ContingencyTable { counts, true_marginal, pred_marginal, n: y_true.len() as u64 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

pub fn evaluate(y_true: &[usize], y_pred: &[usize]) -> Result<Metrics> {
    Ok(Metrics { acc: hungarian_acc(y_true, y_pred)?, nmi: nmi(y_true, y_pred)?, ari: ari(y_true, y_pred)? })
}

/// Minimum-cost perfect assignment on a square cost matrix; returns the
/// column assigned to each row.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return vec![];
    }
    // Potentials method with 1-based sentinel column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// Best one-to-one matching accuracy between predicted clusters and classes.
pub fn hungarian_acc(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(y_true, y_pred)?;
    if table.n == 0 {
        return Ok(1.0);
    }
    let size = table.true_marginal.len().max(table.pred_marginal.len());
    let mut cost = vec![vec![0.0; size]; size];
    for (t, row) in table.counts.iter().enumerate() {
        for (p, &c) in row.iter().enumerate() {
            cost[p][t] = -(c as f64);
        }
    }
    let assign = solve_assignment(&cost);
    let matched: f64 = assign.iter().enumerate().map(|(p, &t)| -cost[p][t]).sum();
    Ok(matched / table.n as f64)
}

fn entropy(marginal: &[u64], n: f64) -> f64 {
    marginal.iter().filter(|&&c| c > 0).map(|&c| {
        let p = c as f64 / n;
        -p * p.ln()
    }).sum()
}

/// Mutual information normalized by the geometric mean of the entropies.
pub fn nmi(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(y_true, y_pred)?;
    let n = t.n as f64;
    if t.n == 0 {
        return Ok(1.0);
    }
    let ht = entropy(&t.true_marginal, n);
    let hp = entropy(&t.pred_marginal, n);
    if ht == 0.0 && hp == 0.0 {
        return Ok(1.0);
    }
    if ht == 0.0 || hp == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (t.true_marginal[i] as f64 * t.pred_marginal[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (ht * hp).sqrt()).clamp(0.0, 1.0))
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts.
pub fn ari(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(y_true, y_pred)?;
    let index: f64 = t.counts.iter().flatten().map(|&c| comb2(c)).sum();
    let a: f64 = t.true_marginal.iter().map(|&c| comb2(c)).sum();
    let b: f64 = t.pred_marginal.iter().map(|&c| comb2(c)).sum();
    let total = comb2(t.n);
    let expected = if total > 0.0 { a * b / total } else { 0.0 };
    let max = 0.5 * (a + b);
    if max == expected {
        let identical = a == b && a == index;
        return Ok(if identical { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}
