use crate::error::{DiecError, Result};

/// Centered moving average over the positions of `series`; windows shrink at
/// the boundaries instead of padding.
pub fn moving_average_centered(series: &[f64], w: usize) -> Result<Vec<f64>> {
    if w == 0 || w % 2 == 0 {
        return Err(DiecError::param(format!("window must be odd and positive, got {w}")));
    }
    if series.is_empty() {
        return Err(DiecError::param("empty series"));
    }
    let half = w / 2;
    let n = series.len();
    Ok((0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(n - 1);
            series[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect())
}

/// The smoothed value at the last position of a growing prefix, i.e. the
/// centered window clipped on the right by what has been evaluated so far.
pub fn online_centered_tail(prefix: &[f64], w: usize) -> Result<f64> {
    let full = moving_average_centered(prefix, w)?;
    Ok(*full.last().expect("non-empty"))
}
