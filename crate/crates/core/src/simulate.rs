//! Synthetic experiment collections with known effects and variances.
//!
//! Group-level means and log-variance effects are drawn from normal
//! hierarchies; each experiment gets a seasonal-plus-linear time term, a
//! covariate effect and an inverse-gamma sampling variance. The summary
//! statistics are then computed from `n` raw observations, accumulated
//! without storing them.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ExperimentRecord};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    I,
    Ii,
    Iii,
    Iv,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::I, Scenario::Ii, Scenario::Iii, Scenario::Iv];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::I => "i",
            Scenario::Ii => "ii",
            Scenario::Iii => "iii",
            Scenario::Iv => "iv",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Contract(format!("unknown scenario {s:?}; expected i, ii, iii or iv")))
    }
}

/// Generator settings. `a1`, `b1`, `c1` scale the sine, cosine and linear
/// time terms; `d1` and `d2` are the scales of the half-normal priors on the
/// between-group variances of the means and of the log-variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub a1: f64,
    pub b1: f64,
    pub c1: f64,
    pub d1: f64,
    pub d2: f64,
    pub m: usize,
    pub j: usize,
    pub k: usize,
    pub t_min: i64,
    pub t_max: i64,
    pub n_min: u64,
    pub n_max: u64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        scenario_params(Scenario::I)
    }
}

/// The four reference settings at full size (80 experiments, 30 × 6 groups,
/// months 1 to 24, sample sizes 100 to 10000).
pub fn scenario_params(id: Scenario) -> ScenarioConfig {
    let (a, d1, d2) = match id {
        Scenario::I => (1.0, 10.0, 2.0),
        Scenario::Ii => (1.0, 5.0, 0.5),
        Scenario::Iii => (0.0, 10.0, 2.0),
        Scenario::Iv => (0.0, 5.0, 0.5),
    };
    ScenarioConfig {
        a1: a,
        b1: a,
        c1: a,
        d1,
        d2,
        m: 80,
        j: 30,
        k: 6,
        t_min: 1,
        t_max: 24,
        n_min: 100,
        n_max: 10_000,
        seed: 0,
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Contract(format!("scenario config: {m}")));
        if self.m < 2 {
            return bad("m must be at least 2");
        }
        if self.j < 1 || self.k < 1 {
            return bad("J and K must be at least 1");
        }
        if !(self.d1 > 0.0 && self.d2 > 0.0) {
            return bad("d1 and d2 must be positive");
        }
        if ![self.a1, self.b1, self.c1].iter().all(|v| v.is_finite()) {
            return bad("time-trend amplitudes must be finite");
        }
        if self.t_min > self.t_max {
            return bad("empty time range");
        }
        if self.n_min < 2 || self.n_min > self.n_max {
            return bad("sample sizes must satisfy 2 <= n_min <= n_max");
        }
        Ok(())
    }
}

/// Ground truth of one generated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub id: String,
    pub theta_true: f64,
    pub sigma2_true: f64,
}

/// Deterministic time term `a₁ sin(2πt/12) + b₁ cos(2πt/12) + c₁ t/12`.
pub fn time_trend(cfg: &ScenarioConfig, t: f64) -> f64 {
    let w = 2.0 * PI * t / 12.0;
    cfg.a1 * w.sin() + cfg.b1 * w.cos() + cfg.c1 * t / 12.0
}

/// `|N(0, sd²)|` by rejection from the untruncated normal.
fn half_normal(sd: f64, rng: &mut ChaCha8Rng) -> f64 {
    let d = Normal::new(0.0, sd).expect("positive sd");
    loop {
        let v = d.sample(rng);
        if v >= 0.0 {
            return v;
        }
    }
}

/// Inverse gamma with shape `shape` and scale `scale` (mean `scale/(shape−1)`).
fn inverse_gamma(shape: f64, scale: f64, rng: &mut ChaCha8Rng) -> f64 {
    1.0 / Gamma::new(shape, 1.0 / scale).expect("positive parameters").sample(rng)
}

/// Draws `n` observations `N(theta, n·sigma2)`, passing each to `sink`, and
/// returns their mean and the estimated variance of that mean,
/// `Σ(y − ȳ)² / (n(n−1))`.
pub fn observe<R: Rng + ?Sized>(
    theta: f64,
    sigma2: f64,
    n: u64,
    rng: &mut R,
    mut sink: impl FnMut(f64),
) -> (f64, f64) {
    let sd = (n as f64 * sigma2).sqrt();
    let (mut mean, mut ss) = (0.0, 0.0);
    for i in 1..=n {
        let z: f64 = rng.sample(StandardNormal);
        let v = theta + sd * z;
        sink(v);
        let delta = v - mean;
        mean += delta / i as f64;
        ss += delta * (v - mean);
    }
    let nf = n as f64;
    (mean, ss / (nf * (nf - 1.0)))
}

/// One synthetic collection and its ground truth.
pub fn generate_dataset(cfg: &ScenarioConfig) -> Result<(Dataset, Vec<Truth>)> {
    cfg.validate()?;
    let mut rng = derive_rng(cfg.seed, &[tag("simulate")]);
    let normal = |m: f64, sd: f64| Normal::new(m, sd).expect("finite parameters");

    let mu_theta = normal(3.0, 2.0).sample(&mut rng);
    let sd_theta = half_normal(cfg.d1, &mut rng).sqrt();
    let theta_a: Vec<f64> = (0..cfg.j).map(|_| mu_theta + sd_theta * rng.sample::<f64, _>(StandardNormal)).collect();
    let theta_b: Vec<f64> = (0..cfg.k).map(|_| mu_theta + sd_theta * rng.sample::<f64, _>(StandardNormal)).collect();
    let mu_sigma = normal(1.0, 0.1).sample(&mut rng);
    let sd_sigma = half_normal(cfg.d2, &mut rng).sqrt();
    let delta_a: Vec<f64> = (0..cfg.j).map(|_| mu_sigma + sd_sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    let delta_b: Vec<f64> = (0..cfg.k).map(|_| mu_sigma + sd_sigma * rng.sample::<f64, _>(StandardNormal)).collect();

    let mut records = Vec::with_capacity(cfg.m);
    let mut truth = Vec::with_capacity(cfg.m);
    for i in 0..cfg.m {
        let x = rng.random_range(1.0..10.0);
        let t = rng.random_range(cfg.t_min..=cfg.t_max) as f64;
        let n = rng.random_range(cfg.n_min..=cfg.n_max);
        let a = rng.random_range(0..cfg.j);
        let b = rng.random_range(0..cfg.k);
        let theta = theta_a[a] + theta_b[b] + time_trend(cfg, t) + 0.5 * x;
        let sigma2 = inverse_gamma(2.0, (delta_a[a] + delta_b[b] + 0.1 * x).exp(), &mut rng);
        let (y, s2) = observe(theta, sigma2, n, &mut rng, |_| {});
        let id = (i + 1).to_string();
        records.push(ExperimentRecord {
            id: id.clone(),
            y,
            s2,
            n,
            t,
            group_a: format!("a{}", a + 1),
            group_b: format!("b{}", b + 1),
            x: vec![x],
        });
        truth.push(Truth {
            id,
            theta_true: theta,
            sigma2_true: sigma2,
        });
    }
    Ok((Dataset::new(records)?, truth))
}

pub fn write_truth<W: std::io::Write>(w: W, truth: &[Truth]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for t in truth {
        wr.serialize(t)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_truth(path: impl AsRef<std::path::Path>) -> Result<Vec<Truth>> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_settings() {
        let p = |s| {
            let c = scenario_params(s);
            (c.a1, c.b1, c.c1, c.d1, c.d2)
        };
        assert_eq!(p(Scenario::I), (1.0, 1.0, 1.0, 10.0, 2.0));
        assert_eq!(p(Scenario::Ii), (1.0, 1.0, 1.0, 5.0, 0.5));
        assert_eq!(p(Scenario::Iii), (0.0, 0.0, 0.0, 10.0, 2.0));
        assert_eq!(p(Scenario::Iv), (0.0, 0.0, 0.0, 5.0, 0.5));
        let c = scenario_params(Scenario::I);
        assert_eq!((c.m, c.j, c.k), (80, 30, 6));
        assert_eq!("III".parse::<Scenario>().unwrap(), Scenario::Iii);
        assert!("v".parse::<Scenario>().is_err());
    }

    #[test]
    fn summary_matches_raw_observations() {
        let mut rng = derive_rng(11, &[]);
        for n in [2, 7, 100, 5000] {
            let mut raw = Vec::new();
            let (y, s2) = observe(3.0, 0.7, n, &mut rng, |v| raw.push(v));
            let nf = n as f64;
            let mean = raw.iter().sum::<f64>() / nf;
            let ss: f64 = raw.iter().map(|v| (v - mean).powi(2)).sum();
            let s2_direct = ss / (nf * (nf - 1.0));
            assert!((y - mean).abs() <= 1e-10 * mean.abs().max(1.0));
            assert!((s2 - s2_direct).abs() <= 1e-10 * s2_direct);
        }
    }

    #[test]
    fn deterministic_and_positive() {
        let mut cfg = scenario_params(Scenario::Ii);
        cfg.seed = 42;
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 80);
        assert!(a.0.records().iter().all(|r| r.s2 > 0.0 && (100..=10_000).contains(&r.n)));
        assert!(a.0.records().iter().all(|r| r.t.fract() == 0.0 && (1.0..=24.0).contains(&r.t)));
        cfg.seed = 43;
        assert_ne!(generate_dataset(&cfg).unwrap().0, a.0);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = scenario_params(Scenario::I);
        cfg.m = 1;
        assert!(generate_dataset(&cfg).is_err());
        let mut cfg = scenario_params(Scenario::I);
        cfg.d2 = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn inverse_gamma_mean_is_scale() {
        let mut rng = derive_rng(3, &[]);
        let n = 400_000;
        let s: f64 = (0..n).map(|_| 1.0 / inverse_gamma(2.0, 5.0, &mut rng)).sum();
        // 1/IG(2, 5) is Gamma(2, rate 5) with mean 0.4
        assert!((s / n as f64 - 0.4).abs() < 0.003);
    }
}
