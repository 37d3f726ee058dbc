//! Point and interval forecast scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default miscoverage level of the scored intervals.
pub const DEFAULT_ALPHA: f64 = 0.05;
/// Fewest draws accepted by [`hpd_interval`].
pub const MIN_HPD_DRAWS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Percent.
    pub mape: f64,
    pub scaled_mse: f64,
    pub interval_score: f64,
    pub alpha: f64,
    pub n_eval: usize,
}

fn check_pair(truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} truth values but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Contract("nothing to score".into()));
    }
    if let Some(i) = truth.iter().position(|&t| t == 0.0) {
        return Err(Error::Domain(format!("truth entry {i} is zero")));
    }
    Ok(())
}

/// Mean absolute percentage error, in percent.
pub fn mape(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let s: f64 = truth
        .iter()
        .zip(pred)
        .map(|(t, p)| ((t - p) / t).abs())
        .sum();
    Ok(100.0 * s / truth.len() as f64)
}

/// Mean of `(θ − ŷ)² / θ²`.
pub fn scaled_mse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let s: f64 = truth
        .iter()
        .zip(pred)
        .map(|(t, p)| (t - p).powi(2) / (t * t))
        .sum();
    Ok(s / truth.len() as f64)
}

/// Shortest window of sorted draws holding `⌈(1−α)·n⌉` of them. Ties go to
/// the lowest start.
pub fn hpd_interval(draws: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if draws.len() < MIN_HPD_DRAWS {
        return Err(Error::Contract(format!(
            "HPD interval needs at least {MIN_HPD_DRAWS} draws, got {}",
            draws.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if draws.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("NaN among draws".into()));
    }
    let mut s = draws.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    let k = (((1.0 - alpha) * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut best = 0;
    let mut width = f64::INFINITY;
    for i in 0..=n - k {
        let w = s[i + k - 1] - s[i];
        if w < width {
            width = w;
            best = i;
        }
    }
    Ok((s[best], s[best + k - 1]))
}

/// Median (mean of the two middle values for even counts).
pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Interval score of central `100(1−α)%` intervals, averaged over items.
pub fn interval_score(truth: &[f64], lower: &[f64], upper: &[f64], alpha: f64) -> Result<f64> {
    if truth.len() != lower.len() || truth.len() != upper.len() {
        return Err(Error::Contract("truth and bounds differ in length".into()));
    }
    if truth.is_empty() {
        return Err(Error::Contract("nothing to score".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut total = 0.0;
    for i in 0..truth.len() {
        let (t, l, u) = (truth[i], lower[i], upper[i]);
        if l > u {
            return Err(Error::Contract(format!("lower bound exceeds upper at {i}")));
        }
        total += u - l;
        if t < l {
            total += 2.0 / alpha * (l - t);
        }
        if t > u {
            total += 2.0 / alpha * (t - u);
        }
    }
    Ok(total / truth.len() as f64)
}

/// All three scores for point forecasts `pred` and intervals `[lower, upper]`.
pub fn score(
    truth: &[f64],
    pred: &[f64],
    lower: &[f64],
    upper: &[f64],
    alpha: f64,
) -> Result<ScoreReport> {
    Ok(ScoreReport {
        mape: mape(truth, pred)?,
        scaled_mse: scaled_mse(truth, pred)?,
        interval_score: interval_score(truth, lower, upper, alpha)?,
        alpha,
        n_eval: truth.len(),
    })
}
