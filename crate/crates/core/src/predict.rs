//! Posterior-predictive draws for future experiments.
//!
//! Every posterior draw yields one future effect `θ̃`, one future sampling
//! variance `σ̃²` and one future observation `ỹ ~ N(θ̃, σ̃²)` per test record.
//! Randomness comes from streams keyed by `(seed, draw, test record)`, so the
//! result does not depend on evaluation order or thread count.

use std::io::Write;

use indexmap::IndexMap;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{time_index, Dataset};
use crate::error::{Error, Result};
use crate::eval::{hpd_interval, median};
use crate::kernel::{gp_condition, KernelParams};
use crate::model::{month_index, Layout, Model, ModelSpec, TimeEffect};
use crate::rng::{derive_rng, tag};
use crate::sampler::PosteriorDraws;

/// Everything needed to forecast a set of future experiments.
#[derive(Debug, Clone, Copy)]
pub struct PredictionTask<'a> {
    /// The data the draws were fitted to. Supplies the level maps, the GP
    /// time grid and the pooled `S²` of the fixed-variance models.
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub draws: &'a PosteriorDraws,
    pub spec: &'a ModelSpec,
    pub seed: u64,
}

/// `draws × m_te` matrices of predictive draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub theta: DMatrix<f64>,
    pub sigma2: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

/// Where a test record's group effect comes from.
#[derive(Debug, Clone, Copy)]
enum Level {
    Known(usize),
    /// Index among labels absent from the fitted level maps.
    Fresh(usize),
}

/// Block offsets in a constrained draw.
struct Offsets {
    alpha_theta: usize,
    theta_a: usize,
    theta_b: usize,
    theta_c: Option<usize>,
    beta_theta: usize,
    tau_a2: Option<usize>,
    tau_b2: Option<usize>,
    sigma_p2: Option<usize>,
    l_p: Option<usize>,
    alpha_sigma: Option<usize>,
    delta_a: Option<usize>,
    delta_b: Option<usize>,
    beta_sigma: Option<usize>,
    tau_c2: Option<usize>,
    tau_d2: Option<usize>,
    tau_sigma2: Option<usize>,
}

impl Offsets {
    fn new(l: &Layout) -> Self {
        let o = |n: &str| l.get(n).map(|b| b.offset);
        Offsets {
            alpha_theta: o("alpha_theta").unwrap_or(0),
            theta_a: o("theta_a").unwrap_or(0),
            theta_b: o("theta_b").unwrap_or(0),
            theta_c: o("theta_c"),
            beta_theta: o("beta_theta").unwrap_or(0),
            tau_a2: o("tau_a2"),
            tau_b2: o("tau_b2"),
            sigma_p2: o("sigma_p2"),
            l_p: o("l_p"),
            alpha_sigma: o("alpha_sigma"),
            delta_a: o("delta_a"),
            delta_b: o("delta_b"),
            beta_sigma: o("beta_sigma"),
            tau_c2: o("tau_c2"),
            tau_d2: o("tau_d2"),
            tau_sigma2: o("tau_sigma2"),
        }
    }
}

/// Resolved test design shared by every draw.
struct Plan<'a> {
    task: PredictionTask<'a>,
    off: Offsets,
    q: usize,
    fe_var: f64,
    a: Vec<Level>,
    b: Vec<Level>,
    n_fresh_a: usize,
    n_fresh_b: usize,
    /// Per test record: index into the training grid, or into `new_times`.
    time: Vec<std::result::Result<usize, usize>>,
    grid: Vec<f64>,
    new_times: Vec<f64>,
    mean_s2: f64,
}

fn resolve_levels<'s>(
    labels: impl Iterator<Item = &'s str>,
    lookup: impl Fn(&str) -> Option<usize>,
) -> (Vec<Level>, usize) {
    let mut fresh: IndexMap<&str, usize> = IndexMap::new();
    let levels = labels
        .map(|s| match lookup(s) {
            Some(i) => Level::Known(i),
            None => {
                let next = fresh.len();
                Level::Fresh(*fresh.entry(s).or_insert(next))
            }
        })
        .collect();
    (levels, fresh.len())
}

impl<'a> Plan<'a> {
    fn new(task: PredictionTask<'a>) -> Result<Self> {
        let model = Model::new(task.train, task.spec)?;
        if model.layout() != &task.draws.layout {
            return Err(Error::Contract(
                "posterior draws were not produced by this model and training set".into(),
            ));
        }
        if task.draws.n_pooled() == 0 {
            return Err(Error::Contract("no posterior draws".into()));
        }
        let q = task.train.q();
        if !task.test.is_empty() && task.test.q() != q {
            return Err(Error::Contract(format!(
                "test data has {} covariates, training data {q}",
                task.test.q()
            )));
        }
        let lv = task.train.levels();
        let recs = task.test.records();
        let (a, n_fresh_a) = resolve_levels(recs.iter().map(|r| r.group_a.as_str()), |s| lv.a_index(s));
        let (b, n_fresh_b) = resolve_levels(recs.iter().map(|r| r.group_b.as_str()), |s| lv.b_index(s));
        let grid = model.time_grid().to_vec();
        let mut new_times: Vec<f64> = Vec::new();
        let time = recs
            .iter()
            .map(|r| match task.spec.kind.time_effect() {
                TimeEffect::None => Ok(0),
                TimeEffect::Monthly => Ok(month_index(r.t)),
                TimeEffect::Gp => time_index(&grid, r.t).ok_or_else(|| {
                    match new_times.iter().position(|&t| t == r.t) {
                        Some(k) => k,
                        None => {
                            new_times.push(r.t);
                            new_times.len() - 1
                        }
                    }
                }),
            })
            .collect();
        let fe_sd = task.spec.priors.fixed_effect_sd;
        Ok(Plan {
            task,
            off: Offsets::new(&task.draws.layout),
            q,
            fe_var: fe_sd * fe_sd,
            a,
            b,
            n_fresh_a,
            n_fresh_b,
            time,
            grid,
            new_times,
            mean_s2: task.train.mean_s2(),
        })
    }

    fn n_test(&self) -> usize {
        self.task.test.len()
    }

    /// Draws effects for labels missing from the level maps: `N(0, τ²)` under
    /// a hierarchy, the fixed-effect prior otherwise.
    fn fresh(&self, n: usize, tau2: Option<usize>, draw: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let sd = tau2.map_or(self.fe_var, |k| draw[k]).sqrt();
        (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn effect(level: Level, base: usize, fresh: &[f64], draw: &[f64]) -> f64 {
        match level {
            Level::Known(i) => draw[base + i],
            Level::Fresh(k) => fresh[k],
        }
    }

    fn theta_row(&self, d: usize, draw: &[f64]) -> Result<Vec<f64>> {
        let o = &self.off;
        let mut rng = derive_rng(self.task.seed, &[tag("theta"), d as u64]);
        let fa = self.fresh(self.n_fresh_a, o.tau_a2, draw, &mut rng);
        let fb = self.fresh(self.n_fresh_b, o.tau_b2, draw, &mut rng);
        let new_c = match (o.theta_c, o.sigma_p2, o.l_p) {
            (Some(c), Some(s), Some(l)) if !self.new_times.is_empty() => {
                let kp = KernelParams::new(draw[s], draw[l], self.task.spec.p_e)?;
                let theta_c = &draw[c..c + self.grid.len()];
                let cond = gp_condition(&self.grid, theta_c, &self.new_times, &kp)?;
                cond.sample(kp.sigma_p2, &mut rng)?.as_slice().to_vec()
            }
            _ => Vec::new(),
        };
        let recs = self.task.test.records();
        Ok((0..self.n_test())
            .map(|j| {
                let r = &recs[j];
                let mut t = draw[o.alpha_theta]
                    + Self::effect(self.a[j], o.theta_a, &fa, draw)
                    + Self::effect(self.b[j], o.theta_b, &fb, draw);
                if let Some(c) = o.theta_c {
                    t += match self.time[j] {
                        Ok(k) => draw[c + k],
                        Err(k) => new_c[k],
                    };
                }
                t + (0..self.q).map(|k| draw[o.beta_theta + k] * r.x[k]).sum::<f64>()
            })
            .collect())
    }

    fn sigma2_row(&self, d: usize, draw: &[f64]) -> Vec<f64> {
        let o = &self.off;
        let (Some(alpha), Some(da), Some(db), Some(beta), Some(ts)) =
            (o.alpha_sigma, o.delta_a, o.delta_b, o.beta_sigma, o.tau_sigma2)
        else {
            return vec![self.mean_s2; self.n_test()];
        };
        let mut rng = derive_rng(self.task.seed, &[tag("sigma2-levels"), d as u64]);
        let fa = self.fresh(self.n_fresh_a, o.tau_c2, draw, &mut rng);
        let fb = self.fresh(self.n_fresh_b, o.tau_d2, draw, &mut rng);
        let sd = draw[ts].sqrt();
        let recs = self.task.test.records();
        (0..self.n_test())
            .map(|j| {
                let r = &recs[j];
                let mean = draw[alpha]
                    + Self::effect(self.a[j], da, &fa, draw)
                    + Self::effect(self.b[j], db, &fb, draw)
                    + (0..self.q).map(|k| draw[beta + k] * r.x[k]).sum::<f64>()
                    - (r.n as f64).ln();
                let mut rng = derive_rng(self.task.seed, &[tag("sigma2"), d as u64, j as u64]);
                (mean + sd * rng.sample::<f64, _>(StandardNormal)).exp()
            })
            .collect()
    }
}

fn collect_rows<F>(task: &PredictionTask<'_>, cols: usize, row: F) -> Result<DMatrix<f64>>
where
    F: Fn(usize, &[f64]) -> Result<Vec<f64>> + Sync,
{
    let draws: Vec<&[f64]> = task.draws.pooled().collect();
    let rows = draws
        .par_iter()
        .enumerate()
        .map(|(d, draw)| row(d, draw))
        .collect::<Result<Vec<_>>>()?;
    let out = DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite predictive draw".into()));
    }
    Ok(out)
}

/// Future effects `θ̃`, one row per pooled posterior draw.
pub fn predict_theta(task: &PredictionTask<'_>) -> Result<DMatrix<f64>> {
    let plan = Plan::new(*task)?;
    collect_rows(task, plan.n_test(), |d, draw| plan.theta_row(d, draw))
}

/// Future sampling variances `σ̃²`. Models without a variance layer predict
/// the mean training `S²` for every draw and record.
pub fn predict_sigma2(task: &PredictionTask<'_>) -> Result<DMatrix<f64>> {
    let plan = Plan::new(*task)?;
    collect_rows(task, plan.n_test(), |d, draw| Ok(plan.sigma2_row(d, draw)))
}

/// `ỹ ~ N(θ̃, σ̃²)` elementwise, with one stream per `(draw, record)`.
pub fn draw_y(theta: &DMatrix<f64>, sigma2: &DMatrix<f64>, seed: u64) -> Result<DMatrix<f64>> {
    if theta.shape() != sigma2.shape() {
        return Err(Error::Contract("theta and sigma2 draws differ in shape".into()));
    }
    if sigma2.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Domain("negative predictive variance".into()));
    }
    Ok(DMatrix::from_fn(theta.nrows(), theta.ncols(), |d, j| {
        let mut rng = derive_rng(seed, &[tag("predict"), d as u64, j as u64]);
        let z: f64 = rng.sample(StandardNormal);
        theta[(d, j)] + sigma2[(d, j)].sqrt() * z
    }))
}

/// All three predictive matrices.
pub fn predict_y(task: &PredictionTask<'_>) -> Result<Predictions> {
    let theta = predict_theta(task)?;
    let sigma2 = predict_sigma2(task)?;
    let y = draw_y(&theta, &sigma2, task.seed)?;
    Ok(Predictions { theta, sigma2, y })
}

/// Point forecast and interval for one test record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSummary {
    pub test_id: String,
    /// Median of the `θ̃` draws.
    pub theta_median: f64,
    pub y_median: f64,
    /// HPD interval of the `ỹ` draws.
    pub lower: f64,
    pub upper: f64,
}

pub fn summarize(test: &Dataset, p: &Predictions, alpha: f64) -> Result<Vec<ForecastSummary>> {
    if p.y.ncols() != test.len() {
        return Err(Error::Contract("predictions do not match the test records".into()));
    }
    test.records()
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let y: Vec<f64> = p.y.column(j).iter().copied().collect();
            let theta: Vec<f64> = p.theta.column(j).iter().copied().collect();
            let (lower, upper) = hpd_interval(&y, alpha)?;
            Ok(ForecastSummary {
                test_id: r.id.clone(),
                theta_median: median(&theta),
                y_median: median(&y),
                lower,
                upper,
            })
        })
        .collect()
}

/// Long-format CSV: `test_id,draw,theta_tilde,sigma2_tilde,y_tilde`.
pub fn write_predictions<W: Write>(w: W, test: &Dataset, p: &Predictions) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["test_id", "draw", "theta_tilde", "sigma2_tilde", "y_tilde"])?;
    for (j, r) in test.records().iter().enumerate() {
        for d in 0..p.theta.nrows() {
            wr.write_record([
                r.id.clone(),
                d.to_string(),
                p.theta[(d, j)].to_string(),
                p.sigma2[(d, j)].to_string(),
                p.y[(d, j)].to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(w: W, rows: &[ForecastSummary]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_summary(path: impl AsRef<std::path::Path>) -> Result<Vec<ForecastSummary>> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}
