//! Gelman–Rubin convergence diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::PosteriorDraws;

pub const DEFAULT_THRESHOLD: f64 = 1.1;

/// Potential scale reduction factor of equal-length chains (classical,
/// without chain splitting).
///
/// Identical constant chains give 1; constant but distinct chains give
/// `+inf`.
pub fn gelman_rubin<C: AsRef<[f64]>>(chains: &[C]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::Contract("R-hat needs at least two chains".into()));
    }
    let n = chains[0].as_ref().len();
    if n < 2 || chains.iter().any(|c| c.as_ref().len() != n) {
        return Err(Error::Contract(
            "R-hat needs equal-length chains of at least two draws".into(),
        ));
    }
    let nf = n as f64;
    let means: Vec<f64> = chains
        .iter()
        .map(|c| c.as_ref().iter().sum::<f64>() / nf)
        .collect();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.as_ref().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b_over_n = means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    if w == 0.0 {
        return Ok(if b_over_n == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let v = (nf - 1.0) / nf * w + b_over_n;
    Ok((v / w).sqrt())
}

/// R-hat on chains split into halves (so `2m` chains of length `n/2`).
pub fn split_gelman_rubin<C: AsRef<[f64]>>(chains: &[C]) -> Result<f64> {
    let half = chains.first().map_or(0, |c| c.as_ref().len() / 2);
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let c = c.as_ref();
            [&c[..half], &c[half..2 * half]]
        })
        .collect();
    gelman_rubin(&halves)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub r_hat: Vec<(String, f64)>,
    pub median_r_hat: f64,
    pub max_r_hat: f64,
    pub threshold: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseOptions {
    pub threshold: f64,
    pub split: bool,
    /// Leave out the per-experiment latent variances (`sigma2.*`).
    pub exclude_latent_variances: bool,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        DiagnoseOptions {
            threshold: DEFAULT_THRESHOLD,
            split: false,
            exclude_latent_variances: false,
        }
    }
}

pub fn convergence_report(draws: &PosteriorDraws, opts: &DiagnoseOptions) -> Result<ConvergenceReport> {
    let names = draws.names();
    let mut r_hat = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        if opts.exclude_latent_variances && name.starts_with("sigma2.") {
            continue;
        }
        let chains: Vec<Vec<f64>> = (0..draws.n_chains()).map(|c| draws.column(c, j)).collect();
        let r = if opts.split {
            split_gelman_rubin(&chains)?
        } else {
            gelman_rubin(&chains)?
        };
        r_hat.push((name.clone(), r));
    }
    Ok(summarize(r_hat, opts.threshold))
}

fn summarize(r_hat: Vec<(String, f64)>, threshold: f64) -> ConvergenceReport {
    let mut vals: Vec<f64> = r_hat
        .iter()
        .map(|(_, r)| if r.is_nan() { f64::INFINITY } else { *r })
        .collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    let max = vals.last().copied().unwrap_or(f64::NAN);
    let median = crate::eval::median(&vals);
    ConvergenceReport {
        converged: max.is_finite() && max <= threshold,
        r_hat,
        median_r_hat: median,
        max_r_hat: max,
        threshold,
    }
}
