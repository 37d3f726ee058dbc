//! Parameter layout, transforms, and the joint log-posterior (with analytic
//! gradient) for STREAM and its seven baselines.
//!
//! Every model shares the observation layer `y_i ~ N(θ_i, σ_i²)` with a
//! linear predictor
//!
//! ```text
//! θ_i = α_θ + θ_a[a_i] + θ_b[b_i] + θ_c[c_i] + β_θ·x_i
//! ```
//!
//! and differs in how the group effects, the time effect and `σ_i²` are
//! treated (see [`ModelKind`]). The sampler works on an unconstrained vector:
//!
//! * positive scalars (`τ²`, `σ_p²`, `l_p`) are stored as logs;
//! * random effects are non-centered, `θ_a = τ_a · raw_a` with `raw_a ~ N(0, 1)`;
//! * the Gaussian-process time effect is non-centered through the Cholesky
//!   factor of its kernel matrix, `θ_c = σ_p · chol(R(l_p)) · z`;
//! * latent variances are stored as `log σ_i²`.
//!
//! [`Model::constrain`] maps back to the centered, positive quantities.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::{time_index, Dataset};
use crate::error::{Error, Result};
use crate::kernel::cholesky_jittered;
use crate::sampler::LogDensity;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Number of month-of-year dummies used by the monthly baselines.
pub const MONTHS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "FE")]
    Fe,
    #[serde(rename = "FE-M")]
    FeM,
    #[serde(rename = "FE-MV")]
    FeMv,
    #[serde(rename = "RE")]
    Re,
    #[serde(rename = "RE-M")]
    ReM,
    #[serde(rename = "RE-MV")]
    ReMv,
    #[serde(rename = "RE-GP")]
    ReGp,
    #[serde(rename = "STREAM")]
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeEffect {
    None,
    /// Month-of-year fixed effects.
    Monthly,
    /// Periodic Gaussian process over the distinct training times.
    Gp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::Fe,
        ModelKind::FeM,
        ModelKind::FeMv,
        ModelKind::Re,
        ModelKind::ReM,
        ModelKind::ReMv,
        ModelKind::ReGp,
        ModelKind::Stream,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fe => "FE",
            ModelKind::FeM => "FE-M",
            ModelKind::FeMv => "FE-MV",
            ModelKind::Re => "RE",
            ModelKind::ReM => "RE-M",
            ModelKind::ReMv => "RE-MV",
            ModelKind::ReGp => "RE-GP",
            ModelKind::Stream => "STREAM",
        }
    }

    /// Group effects drawn from a common distribution with an inferred scale.
    pub fn random_effects(self) -> bool {
        !matches!(self, ModelKind::Fe | ModelKind::FeM | ModelKind::FeMv)
    }

    /// `σ_i²` is latent and `S_i²` enters the likelihood.
    pub fn variance_model(self) -> bool {
        matches!(self, ModelKind::FeMv | ModelKind::ReMv | ModelKind::Stream)
    }

    pub fn time_effect(self) -> TimeEffect {
        match self {
            ModelKind::Fe | ModelKind::Re => TimeEffect::None,
            ModelKind::FeM | ModelKind::FeMv | ModelKind::ReM | ModelKind::ReMv => {
                TimeEffect::Monthly
            }
            ModelKind::ReGp | ModelKind::Stream => TimeEffect::Gp,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Contract(format!("unknown model kind `{s}`")))
    }
}

/// Hyperparameters. Normal priors are `N(m, s²)`; half-Cauchy priors apply
/// to the variance-like parameter itself (`τ²`, `σ_p²`, `l_p`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub m_alpha_theta: f64,
    pub s_alpha_theta: f64,
    pub m_alpha_sigma: f64,
    pub s_alpha_sigma: f64,
    /// Per-covariate prior means; empty means all zero, one entry broadcasts.
    pub m_beta_theta: Vec<f64>,
    pub s_beta_theta: Vec<f64>,
    pub m_beta_sigma: Vec<f64>,
    pub s_beta_sigma: Vec<f64>,
    pub eta_a: f64,
    pub eta_b: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    pub eta_e: f64,
    pub eta_l: f64,
    pub eta_sigma: f64,
    /// Prior sd of every fixed effect in the FE-style baselines.
    pub fixed_effect_sd: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            m_alpha_theta: 0.0,
            s_alpha_theta: 1000.0,
            m_alpha_sigma: 0.0,
            s_alpha_sigma: 1000.0,
            m_beta_theta: Vec::new(),
            s_beta_theta: Vec::new(),
            m_beta_sigma: Vec::new(),
            s_beta_sigma: Vec::new(),
            eta_a: 2.5,
            eta_b: 2.5,
            eta_c: 2.5,
            eta_d: 2.5,
            eta_e: 2.5,
            eta_l: 2.5,
            eta_sigma: 2.5,
            fixed_effect_sd: 1000f64.sqrt(),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let scales = [
            ("s_alpha_theta", self.s_alpha_theta),
            ("s_alpha_sigma", self.s_alpha_sigma),
            ("eta_a", self.eta_a),
            ("eta_b", self.eta_b),
            ("eta_c", self.eta_c),
            ("eta_d", self.eta_d),
            ("eta_e", self.eta_e),
            ("eta_l", self.eta_l),
            ("eta_sigma", self.eta_sigma),
            ("fixed_effect_sd", self.fixed_effect_sd),
        ];
        for (name, v) in scales {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Contract(format!("prior scale {name} must be positive")));
            }
        }
        for (name, v) in [("s_beta_theta", &self.s_beta_theta), ("s_beta_sigma", &self.s_beta_sigma)] {
            if v.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(Error::Contract(format!("prior scales {name} must be positive")));
            }
        }
        Ok(())
    }

    fn expand(v: &[f64], q: usize, default: f64, name: &str) -> Result<Vec<f64>> {
        match v.len() {
            0 => Ok(vec![default; q]),
            1 => Ok(vec![v[0]; q]),
            n if n == q => Ok(v.to_vec()),
            n => Err(Error::Contract(format!(
                "prior vector {name} has length {n}, expected {q}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default)]
    pub priors: PriorConfig,
    /// Kernel period; `σ_p²` and `l_p` are inferred.
    #[serde(default = "default_period")]
    pub p_e: f64,
}

fn default_period() -> f64 {
    12.0
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            priors: PriorConfig::default(),
            p_e: default_period(),
        }
    }

    pub fn variance_model(&self) -> bool {
        self.kind.variance_model()
    }

    pub fn uses_gp(&self) -> bool {
        self.kind.time_effect() == TimeEffect::Gp
    }
}

/// Month-of-year index (0-based) for a time stamp in months, wrapping so
/// that future months reuse the training dummies.
pub fn month_index(t: f64) -> usize {
    ((t.round() as i64 - 1).rem_euclid(MONTHS as i64)) as usize
}

/// A named contiguous slice of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Scalars are written without an index in flattened names.
    pub scalar: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    blocks: Vec<Block>,
}

impl Layout {
    pub fn new() -> Self {
        Layout::default()
    }

    pub fn push(&mut self, name: &str, len: usize) -> usize {
        self.push_block(name, len, false)
    }

    pub fn push_scalar(&mut self, name: &str) -> usize {
        self.push_block(name, 1, true)
    }

    fn push_block(&mut self, name: &str, len: usize, scalar: bool) -> usize {
        assert!(self.get(name).is_none(), "duplicate block {name}");
        let offset = self.dim();
        self.blocks.push(Block {
            name: name.to_string(),
            offset,
            len,
            scalar,
        });
        offset
    }

    pub fn dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn get(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Flattened parameter names, e.g. `alpha_theta`, `theta_a.1`, `theta_a.2`.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        for b in &self.blocks {
            if b.scalar {
                names.push(b.name.clone());
            } else {
                names.extend((1..=b.len).map(|i| format!("{}.{i}", b.name)));
            }
        }
        names
    }

    /// Rebuilds a layout from flattened names as produced by [`param_names`].
    ///
    /// [`param_names`]: Layout::param_names
    pub fn from_param_names<S: AsRef<str>>(names: &[S]) -> Result<Layout> {
        let mut layout = Layout::new();
        for (i, name) in names.iter().enumerate() {
            let name = name.as_ref();
            let (base, idx) = match name.rsplit_once('.') {
                Some((b, k)) => match k.parse::<usize>() {
                    Ok(k) => (b, Some(k)),
                    Err(_) => (name, None),
                },
                None => (name, None),
            };
            let continues = matches!(
                (idx, layout.blocks.last()),
                (Some(k), Some(b)) if b.name == base && !b.scalar && k == b.len + 1
            );
            if continues {
                layout.blocks.last_mut().expect("checked").len += 1;
            } else if layout.get(base).is_some() {
                return Err(Error::Contract(format!("duplicate block `{base}`")));
            } else {
                match idx {
                    Some(1) => {
                        layout.push(base, 1);
                    }
                    None => {
                        layout.push_scalar(base);
                    }
                    Some(_) => {
                        return Err(Error::Contract(format!(
                            "column {i} (`{name}`) does not continue a block"
                        )))
                    }
                }
            }
        }
        Ok(layout)
    }
}

/// A parameter vector together with its block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::Contract(format!(
                "vector of length {} does not match layout of dimension {}",
                values.len(),
                layout.dim()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .get(name)
            .map(|b| &self.values[b.offset..b.offset + b.len])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let b = self.layout.get(name)?.clone();
        Some(&mut self.values[b.offset..b.offset + b.len])
    }

    /// Named view of every block, in layout order.
    pub fn unpack(&self) -> Vec<(String, Vec<f64>)> {
        self.layout
            .blocks()
            .iter()
            .map(|b| (b.name.clone(), self.values[b.offset..b.offset + b.len].to_vec()))
            .collect()
    }

    pub fn pack(layout: Layout, blocks: &[(String, Vec<f64>)]) -> Result<Self> {
        let mut values = vec![f64::NAN; layout.dim()];
        for (name, v) in blocks {
            let b = layout
                .get(name)
                .ok_or_else(|| Error::Contract(format!("unknown block `{name}`")))?;
            if v.len() != b.len {
                return Err(Error::Contract(format!("block `{name}` has wrong length")));
            }
            values[b.offset..b.offset + b.len].copy_from_slice(v);
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Contract("not every block was supplied".into()));
        }
        ParamVector::new(values, layout)
    }
}

/// How a block of group effects is modelled.
#[derive(Debug, Clone, Copy)]
enum EffectPrior {
    /// `N(0, τ²)` with `τ² ~ HC(η)`; offset of the log-`τ²` scalar.
    Random { log_tau2: usize, eta: f64 },
    /// Independent `N(0, var)`.
    Fixed { var: f64 },
}

#[derive(Debug, Clone, Copy)]
struct EffectBlock {
    offset: usize,
    len: usize,
    prior: EffectPrior,
}

#[derive(Debug, Clone)]
struct GpBlock {
    z: usize,
    log_sigma_p2: usize,
    log_l_p: usize,
    /// `sin²(π|t_l − t_l′|/p_e)` over the time grid, row-major.
    sin2: Vec<f64>,
}

#[derive(Debug, Clone)]
struct VarianceBlock {
    alpha: usize,
    delta_a: EffectBlock,
    delta_b: EffectBlock,
    beta: usize,
    log_tau_sigma2: usize,
    log_sigma2: usize,
}

#[derive(Debug, Clone)]
enum TimeBlock {
    None,
    Monthly { offset: usize, var: f64 },
    Gp(GpBlock),
}

/// Log-density of one of the eight models on a fixed dataset.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layout: Layout,
    m: usize,
    q: usize,
    y: Vec<f64>,
    s2: Vec<f64>,
    log_n: Vec<f64>,
    a_idx: Vec<usize>,
    b_idx: Vec<usize>,
    c_idx: Vec<usize>,
    x: Vec<f64>,
    /// Time grid indexed by `c_idx`: distinct training times (GP) or month
    /// numbers 1..=12 (monthly dummies).
    time_grid: Vec<f64>,
    /// `(k ln k − ln Γ(k) + (k−1) ln S²)` with `k = (n−1)/2`.
    gamma_const: Vec<f64>,
    gamma_shape: Vec<f64>,
    alpha_theta: usize,
    theta_a: EffectBlock,
    theta_b: EffectBlock,
    beta_theta: usize,
    time: TimeBlock,
    var: Option<VarianceBlock>,
    m_beta_theta: Vec<f64>,
    s_beta_theta: Vec<f64>,
    m_beta_sigma: Vec<f64>,
    s_beta_sigma: Vec<f64>,
}

impl Model {
    pub fn new(d: &Dataset, spec: &ModelSpec) -> Result<Model> {
        spec.priors.validate()?;
        if !(spec.p_e > 0.0) {
            return Err(Error::Contract("kernel period must be positive".into()));
        }
        let kind = spec.kind;
        let pr = &spec.priors;
        let lv = d.levels();
        let (n_a, n_b, q, m) = (lv.n_a(), lv.n_b(), d.q(), d.len());
        let fe_var = pr.fixed_effect_sd * pr.fixed_effect_sd;

        let time_grid: Vec<f64> = match kind.time_effect() {
            TimeEffect::None => Vec::new(),
            TimeEffect::Monthly => (1..=MONTHS).map(|k| k as f64).collect(),
            TimeEffect::Gp => d.observed_times(),
        };

        // Block order: mean model, then its scales, then the variance model.
        let mut layout = Layout::new();
        let alpha_theta = layout.push_scalar("alpha_theta");
        let theta_a_off = layout.push("theta_a", n_a);
        let theta_b_off = layout.push("theta_b", n_b);
        let theta_c_off = (kind.time_effect() != TimeEffect::None)
            .then(|| layout.push("theta_c", time_grid.len()));
        let beta_theta = layout.push("beta_theta", q);
        let (theta_a, theta_b) = if kind.random_effects() {
            let ta = layout.push_scalar("tau_a2");
            let tb = layout.push_scalar("tau_b2");
            (
                EffectBlock {
                    offset: theta_a_off,
                    len: n_a,
                    prior: EffectPrior::Random { log_tau2: ta, eta: pr.eta_a },
                },
                EffectBlock {
                    offset: theta_b_off,
                    len: n_b,
                    prior: EffectPrior::Random { log_tau2: tb, eta: pr.eta_b },
                },
            )
        } else {
            let prior = EffectPrior::Fixed { var: fe_var };
            (
                EffectBlock { offset: theta_a_off, len: n_a, prior },
                EffectBlock { offset: theta_b_off, len: n_b, prior },
            )
        };
        let time = match (kind.time_effect(), theta_c_off) {
            (TimeEffect::Monthly, Some(offset)) => TimeBlock::Monthly { offset, var: fe_var },
            (TimeEffect::Gp, Some(z)) => {
                let log_sigma_p2 = layout.push_scalar("sigma_p2");
                let log_l_p = layout.push_scalar("l_p");
                let l = time_grid.len();
                let mut sin2 = vec![0.0; l * l];
                for i in 0..l {
                    for j in 0..l {
                        let s = (PI * (time_grid[i] - time_grid[j]).abs() / spec.p_e).sin();
                        sin2[i * l + j] = s * s;
                    }
                }
                TimeBlock::Gp(GpBlock {
                    z,
                    log_sigma_p2,
                    log_l_p,
                    sin2,
                })
            }
            _ => TimeBlock::None,
        };
        let var = if kind.variance_model() {
            let alpha = layout.push_scalar("alpha_sigma");
            let da = layout.push("delta_a", n_a);
            let db = layout.push("delta_b", n_b);
            let beta = layout.push("beta_sigma", q);
            let (pa, pb) = if kind.random_effects() {
                let tc = layout.push_scalar("tau_c2");
                let td = layout.push_scalar("tau_d2");
                (
                    EffectPrior::Random { log_tau2: tc, eta: pr.eta_c },
                    EffectPrior::Random { log_tau2: td, eta: pr.eta_d },
                )
            } else {
                (EffectPrior::Fixed { var: fe_var }, EffectPrior::Fixed { var: fe_var })
            };
            let log_tau_sigma2 = layout.push_scalar("tau_sigma2");
            let log_sigma2 = layout.push("sigma2", m);
            Some(VarianceBlock {
                alpha,
                delta_a: EffectBlock { offset: da, len: n_a, prior: pa },
                delta_b: EffectBlock { offset: db, len: n_b, prior: pb },
                beta,
                log_tau_sigma2,
                log_sigma2,
            })
        } else {
            None
        };

        let mut a_idx = Vec::with_capacity(m);
        let mut b_idx = Vec::with_capacity(m);
        let mut c_idx = Vec::with_capacity(m);
        let mut x = Vec::with_capacity(m * q);
        for (i, r) in d.records().iter().enumerate() {
            let unresolved = |what: &str| Error::Validation {
                row: i + 1,
                message: format!("{what} label not in the dataset's level maps"),
            };
            a_idx.push(lv.a_index(&r.group_a).ok_or_else(|| unresolved("group_a"))?);
            b_idx.push(lv.b_index(&r.group_b).ok_or_else(|| unresolved("group_b"))?);
            c_idx.push(match kind.time_effect() {
                TimeEffect::None => 0,
                TimeEffect::Monthly => month_index(r.t),
                TimeEffect::Gp => time_index(&time_grid, r.t).expect("grid built from records"),
            });
            if r.x.len() != q {
                return Err(Error::Validation {
                    row: i + 1,
                    message: "covariate length mismatch".into(),
                });
            }
            x.extend_from_slice(&r.x);
        }
        let gamma_shape: Vec<f64> = d.records().iter().map(|r| 0.5 * (r.n as f64 - 1.0)).collect();
        let gamma_const = d
            .records()
            .iter()
            .zip(&gamma_shape)
            .map(|(r, &k)| k * k.ln() - ln_gamma(k) + (k - 1.0) * r.s2.ln())
            .collect();

        Ok(Model {
            spec: spec.clone(),
            layout,
            m,
            q,
            y: d.records().iter().map(|r| r.y).collect(),
            s2: d.records().iter().map(|r| r.s2).collect(),
            log_n: d.records().iter().map(|r| (r.n as f64).ln()).collect(),
            a_idx,
            b_idx,
            c_idx,
            x,
            time_grid,
            gamma_const,
            gamma_shape,
            alpha_theta,
            theta_a,
            theta_b,
            beta_theta,
            time,
            var,
            m_beta_theta: PriorConfig::expand(&pr.m_beta_theta, q, 0.0, "m_beta_theta")?,
            s_beta_theta: PriorConfig::expand(&pr.s_beta_theta, q, 1000.0, "s_beta_theta")?,
            m_beta_sigma: PriorConfig::expand(&pr.m_beta_sigma, q, 0.0, "m_beta_sigma")?,
            s_beta_sigma: PriorConfig::expand(&pr.s_beta_sigma, q, 1000.0, "s_beta_sigma")?,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Times indexed by the `theta_c` block (empty when there is none).
    pub fn time_grid(&self) -> &[f64] {
        &self.time_grid
    }

    fn check_len(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.layout.dim() {
            return Err(Error::Contract(format!(
                "parameter vector has length {}, layout expects {}",
                u.len(),
                self.layout.dim()
            )));
        }
        Ok(())
    }

    /// Log-posterior density of the unconstrained vector, or `-inf` when it
    /// is not finite.
    pub fn log_posterior(&self, u: &[f64]) -> f64 {
        if u.len() != self.layout.dim() {
            return f64::NEG_INFINITY;
        }
        self.eval(u, None)
    }

    /// Analytic gradient of [`Model::log_posterior`].
    pub fn grad_log_posterior(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u)?;
        let mut g = vec![0.0; u.len()];
        let lp = self.eval(u, Some(&mut g));
        if !lp.is_finite() {
            return Err(Error::Domain("log posterior is not finite".into()));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            let block = self
                .layout
                .blocks()
                .iter()
                .find(|b| i >= b.offset && i < b.offset + b.len)
                .map_or("?", |b| b.name.as_str());
            return Err(Error::NonFiniteGradient(block.to_string()));
        }
        Ok(g)
    }

    /// Values of the GP time effect, with the Cholesky pieces needed for the
    /// gradient. `None` on factorization failure.
    fn gp_effect(&self, gp: &GpBlock, u: &[f64]) -> Option<GpState> {
        let l = self.time_grid.len();
        let sigma_p = (0.5 * u[gp.log_sigma_p2]).exp();
        let lp2 = (2.0 * u[gp.log_l_p]).exp();
        let r = DMatrix::from_fn(l, l, |i, j| (-2.0 * gp.sin2[i * l + j] / lp2).exp());
        let (chol, _) = cholesky_jittered(&r, 1.0).ok()?;
        let lower = chol.unpack();
        let z = DVector::from_column_slice(&u[gp.z..gp.z + l]);
        let theta = (&lower * &z) * sigma_p;
        Some(GpState {
            sigma_p,
            lp2,
            r,
            lower,
            z,
            theta,
        })
    }

    fn effects(&self, b: &EffectBlock, u: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let raw = &u[b.offset..b.offset + b.len];
        match b.prior {
            EffectPrior::Random { log_tau2, .. } => {
                let tau = (0.5 * u[log_tau2]).exp();
                out.extend(raw.iter().map(|v| tau * v));
            }
            EffectPrior::Fixed { .. } => out.extend_from_slice(raw),
        }
    }

    /// Prior for one block of group effects, plus the chain rule from the
    /// centered-effect gradient `ge` onto the unconstrained vector.
    fn effect_prior(
        &self,
        b: &EffectBlock,
        u: &[f64],
        eff: &[f64],
        ge: &[f64],
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let raw = &u[b.offset..b.offset + b.len];
        match b.prior {
            EffectPrior::Random { log_tau2, eta } => {
                let w = u[log_tau2];
                let mut lp: f64 = raw.iter().map(|r| -LN_SQRT_2PI - 0.5 * r * r).sum();
                lp += log_half_cauchy_unconstrained(w, eta);
                if let Some(g) = grad {
                    let tau = (0.5 * w).exp();
                    let mut gw = 0.0;
                    for j in 0..b.len {
                        g[b.offset + j] += tau * ge[j] - raw[j];
                        gw += 0.5 * eff[j] * ge[j];
                    }
                    g[log_tau2] += gw + d_log_half_cauchy_unconstrained(w, eta);
                }
                lp
            }
            EffectPrior::Fixed { var } => {
                let lp = eff.iter().map(|&e| normal_ln_pdf(e, 0.0, var)).sum();
                if let Some(g) = grad {
                    for j in 0..b.len {
                        g[b.offset + j] += ge[j] - eff[j] / var;
                    }
                }
                lp
            }
        }
    }

    fn eval(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let q = self.q;
        let pr = &self.spec.priors;
        let mut a_eff = Vec::new();
        let mut b_eff = Vec::new();
        self.effects(&self.theta_a, u, &mut a_eff);
        self.effects(&self.theta_b, u, &mut b_eff);
        let gp = match &self.time {
            TimeBlock::Gp(gp) => match self.gp_effect(gp, u) {
                Some(s) => Some(s),
                None => return f64::NEG_INFINITY,
            },
            _ => None,
        };
        let c_eff: &[f64] = match (&self.time, &gp) {
            (TimeBlock::Monthly { offset, .. }, _) => &u[*offset..*offset + MONTHS],
            (_, Some(s)) => s.theta.as_slice(),
            _ => &[],
        };
        let alpha = u[self.alpha_theta];
        let beta = &u[self.beta_theta..self.beta_theta + q];

        let mut da_eff = Vec::new();
        let mut db_eff = Vec::new();
        if let Some(v) = &self.var {
            self.effects(&v.delta_a, u, &mut da_eff);
            self.effects(&v.delta_b, u, &mut db_eff);
        }

        // centered-space gradient accumulators
        let mut ga = vec![0.0; a_eff.len()];
        let mut gb = vec![0.0; b_eff.len()];
        let mut gc = vec![0.0; c_eff.len()];
        let mut gda = vec![0.0; da_eff.len()];
        let mut gdb = vec![0.0; db_eff.len()];
        let mut g_alpha = 0.0;
        let mut g_beta = vec![0.0; q];
        let mut g_alpha_s = 0.0;
        let mut g_beta_s = vec![0.0; q];
        let mut g_omega = 0.0;

        let mut lp = 0.0;
        let has_c = !matches!(self.time, TimeBlock::None);
        for i in 0..self.m {
            let xi = &self.x[i * q..(i + 1) * q];
            let mut theta = alpha + a_eff[self.a_idx[i]] + b_eff[self.b_idx[i]];
            if has_c {
                theta += c_eff[self.c_idx[i]];
            }
            theta += beta.iter().zip(xi).map(|(b, x)| b * x).sum::<f64>();
            let resid = self.y[i] - theta;
            let (sigma2, log_sigma2) = match &self.var {
                Some(v) => {
                    let ls = u[v.log_sigma2 + i];
                    (ls.exp(), ls)
                }
                None => (self.s2[i], self.s2[i].ln()),
            };
            lp += -LN_SQRT_2PI - 0.5 * log_sigma2 - 0.5 * resid * resid / sigma2;
            let g_theta = resid / sigma2;
            if grad.is_some() {
                g_alpha += g_theta;
                ga[self.a_idx[i]] += g_theta;
                gb[self.b_idx[i]] += g_theta;
                if has_c {
                    gc[self.c_idx[i]] += g_theta;
                }
                for k in 0..q {
                    g_beta[k] += g_theta * xi[k];
                }
            }
            if let Some(v) = &self.var {
                let vv = log_sigma2;
                let k = self.gamma_shape[i];
                let ratio = self.s2[i] * (-vv).exp();
                // S² | σ² ~ Gamma(k, k/σ²)
                lp += self.gamma_const[i] - k * vv - k * ratio;
                let omega = u[v.log_tau_sigma2];
                let inv_t = (-omega).exp();
                let vbeta = &u[v.beta..v.beta + q];
                let mu = u[v.alpha]
                    + da_eff[self.a_idx[i]]
                    + db_eff[self.b_idx[i]]
                    + vbeta.iter().zip(xi).map(|(b, x)| b * x).sum::<f64>()
                    - self.log_n[i];
                let dev = vv - mu;
                lp += -LN_SQRT_2PI - 0.5 * omega - 0.5 * dev * dev * inv_t;
                if let Some(g) = grad.as_deref_mut() {
                    g[v.log_sigma2 + i] +=
                        -0.5 + 0.5 * resid * resid / sigma2 - k + k * ratio - dev * inv_t;
                    let g_mu = dev * inv_t;
                    g_alpha_s += g_mu;
                    gda[self.a_idx[i]] += g_mu;
                    gdb[self.b_idx[i]] += g_mu;
                    for kk in 0..q {
                        g_beta_s[kk] += g_mu * xi[kk];
                    }
                    g_omega += -0.5 + 0.5 * dev * dev * inv_t;
                }
            }
        }

        // priors on the intercept and slopes
        lp += normal_ln_pdf(alpha, pr.m_alpha_theta, pr.s_alpha_theta.powi(2));
        for k in 0..q {
            lp += normal_ln_pdf(beta[k], self.m_beta_theta[k], self.s_beta_theta[k].powi(2));
        }
        if let Some(g) = grad.as_deref_mut() {
            g[self.alpha_theta] +=
                g_alpha - (alpha - pr.m_alpha_theta) / pr.s_alpha_theta.powi(2);
            for k in 0..q {
                g[self.beta_theta + k] += g_beta[k]
                    - (beta[k] - self.m_beta_theta[k]) / self.s_beta_theta[k].powi(2);
            }
        }

        lp += self.effect_prior(&self.theta_a, u, &a_eff, &ga, grad.as_deref_mut());
        lp += self.effect_prior(&self.theta_b, u, &b_eff, &gb, grad.as_deref_mut());

        match (&self.time, &gp) {
            (TimeBlock::Monthly { offset, var }, _) => {
                for (l, &c) in c_eff.iter().enumerate() {
                    lp += normal_ln_pdf(c, 0.0, *var);
                    if let Some(g) = grad.as_deref_mut() {
                        g[offset + l] += gc[l] - c / var;
                    }
                }
            }
            (TimeBlock::Gp(blk), Some(s)) => {
                lp += s.z.iter().map(|z| -LN_SQRT_2PI - 0.5 * z * z).sum::<f64>();
                lp += log_half_cauchy_unconstrained(u[blk.log_sigma_p2], pr.eta_sigma);
                lp += log_half_cauchy_unconstrained(u[blk.log_l_p], pr.eta_l);
                if let Some(g) = grad.as_deref_mut() {
                    self.gp_gradient(blk, s, &gc, u, g);
                }
            }
            _ => {}
        }

        if let Some(v) = &self.var {
            let a_s = u[v.alpha];
            let b_s = &u[v.beta..v.beta + q];
            lp += normal_ln_pdf(a_s, pr.m_alpha_sigma, pr.s_alpha_sigma.powi(2));
            for k in 0..q {
                lp += normal_ln_pdf(b_s[k], self.m_beta_sigma[k], self.s_beta_sigma[k].powi(2));
            }
            lp += log_half_cauchy_unconstrained(u[v.log_tau_sigma2], pr.eta_e);
            if let Some(g) = grad.as_deref_mut() {
                g[v.alpha] += g_alpha_s - (a_s - pr.m_alpha_sigma) / pr.s_alpha_sigma.powi(2);
                for k in 0..q {
                    g[v.beta + k] += g_beta_s[k]
                        - (b_s[k] - self.m_beta_sigma[k]) / self.s_beta_sigma[k].powi(2);
                }
                g[v.log_tau_sigma2] +=
                    g_omega + d_log_half_cauchy_unconstrained(u[v.log_tau_sigma2], pr.eta_e);
            }
            lp += self.effect_prior(&v.delta_a, u, &da_eff, &gda, grad.as_deref_mut());
            lp += self.effect_prior(&v.delta_b, u, &db_eff, &gdb, grad.as_deref_mut());
        }

        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        if let Some(g) = grad {
            if g.iter().any(|v| !v.is_finite()) {
                return f64::NEG_INFINITY;
            }
        }
        lp
    }

    /// Chain rule through `θ_c = σ_p · L(l_p) · z`.
    fn gp_gradient(&self, blk: &GpBlock, s: &GpState, gc: &[f64], u: &[f64], g: &mut [f64]) {
        let l = gc.len();
        let eta_s = self.spec.priors.eta_sigma;
        let eta_l = self.spec.priors.eta_l;
        let gcv = DVector::from_column_slice(gc);
        // dθ/dz = σ_p L
        let gz = s.lower.transpose() * &gcv * s.sigma_p;
        for j in 0..l {
            g[blk.z + j] += gz[j] - s.z[j];
        }
        // dθ/d(log σ_p²) = θ / 2
        g[blk.log_sigma_p2] += 0.5 * s.theta.dot(&gcv)
            + d_log_half_cauchy_unconstrained(u[blk.log_sigma_p2], eta_s);
        // dL/d(log l_p) = L Φ(L⁻¹ dR L⁻ᵀ), dR_ij = R_ij · 4 sin²_ij / l_p²
        let mut g_l = d_log_half_cauchy_unconstrained(u[blk.log_l_p], eta_l);
        if l > 1 {
            let dr = DMatrix::from_fn(l, l, |i, j| {
                if i == j {
                    0.0
                } else {
                    s.r[(i, j)] * 4.0 * blk.sin2[i * l + j] / s.lp2
                }
            });
            if let Some(y) = s.lower.solve_lower_triangular(&dr) {
                if let Some(xm) = s.lower.solve_lower_triangular(&y.transpose()) {
                    let phi = DMatrix::from_fn(l, l, |i, j| match i.cmp(&j) {
                        std::cmp::Ordering::Greater => xm[(i, j)],
                        std::cmp::Ordering::Equal => 0.5 * xm[(i, i)],
                        std::cmp::Ordering::Less => 0.0,
                    });
                    let dl = &s.lower * phi;
                    g_l += s.sigma_p * gcv.dot(&(dl * &s.z));
                } else {
                    g_l = f64::NAN;
                }
            } else {
                g_l = f64::NAN;
            }
        }
        g[blk.log_l_p] += g_l;
    }

    /// Maps an unconstrained vector to centered, positive quantities:
    /// exponentiates log-scale scalars and latent variances, scales the
    /// non-centered effects, and forms the GP time effect.
    pub fn constrain(&self, u: &[f64]) -> Result<ParamVector> {
        self.check_len(u)?;
        let mut c = u.to_vec();
        self.constrain_into(u, &mut c)?;
        ParamVector::new(c, self.layout.clone())
    }

    fn constrain_into(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(u);
        let mut buf = Vec::new();
        let mut blocks = vec![&self.theta_a, &self.theta_b];
        if let Some(v) = &self.var {
            blocks.push(&v.delta_a);
            blocks.push(&v.delta_b);
        }
        for b in blocks {
            self.effects(b, u, &mut buf);
            out[b.offset..b.offset + b.len].copy_from_slice(&buf);
            if let EffectPrior::Random { log_tau2, .. } = b.prior {
                out[log_tau2] = u[log_tau2].exp();
            }
        }
        if let TimeBlock::Gp(gp) = &self.time {
            let s = self
                .gp_effect(gp, u)
                .ok_or(Error::Factorization { jitter: crate::kernel::MAX_JITTER })?;
            out[gp.z..gp.z + s.theta.len()].copy_from_slice(s.theta.as_slice());
            out[gp.log_sigma_p2] = u[gp.log_sigma_p2].exp();
            out[gp.log_l_p] = u[gp.log_l_p].exp();
        }
        if let Some(v) = &self.var {
            out[v.log_tau_sigma2] = u[v.log_tau_sigma2].exp();
            for i in 0..self.m {
                out[v.log_sigma2 + i] = u[v.log_sigma2 + i].exp();
            }
        }
        Ok(())
    }

    /// Inverse of [`Model::constrain`].
    pub fn unconstrain(&self, c: &ParamVector) -> Result<Vec<f64>> {
        if c.layout != self.layout {
            return Err(Error::Contract("layout does not match the model".into()));
        }
        let cv = &c.values;
        let mut u = cv.clone();
        let positive = |v: f64, name: &str| {
            if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(Error::Domain(format!("{name} must be positive, got {v}")))
            }
        };
        let mut blocks = vec![&self.theta_a, &self.theta_b];
        if let Some(v) = &self.var {
            blocks.push(&v.delta_a);
            blocks.push(&v.delta_b);
        }
        for b in blocks {
            if let EffectPrior::Random { log_tau2, .. } = b.prior {
                u[log_tau2] = positive(cv[log_tau2], "tau2")?;
                let tau = cv[log_tau2].sqrt();
                for j in 0..b.len {
                    u[b.offset + j] = cv[b.offset + j] / tau;
                }
            }
        }
        if let TimeBlock::Gp(gp) = &self.time {
            u[gp.log_sigma_p2] = positive(cv[gp.log_sigma_p2], "sigma_p2")?;
            u[gp.log_l_p] = positive(cv[gp.log_l_p], "l_p")?;
            let l = self.time_grid.len();
            // the factor depends only on l_p, so zero z is fine here
            let s = self
                .gp_effect(gp, &u)
                .ok_or(Error::Factorization { jitter: crate::kernel::MAX_JITTER })?;
            let theta = DVector::from_column_slice(&cv[gp.z..gp.z + l]);
            let z = s
                .lower
                .solve_lower_triangular(&(theta / s.sigma_p))
                .ok_or(Error::Factorization { jitter: crate::kernel::MAX_JITTER })?;
            u[gp.z..gp.z + l].copy_from_slice(z.as_slice());
        }
        if let Some(v) = &self.var {
            u[v.log_tau_sigma2] = positive(cv[v.log_tau_sigma2], "tau_sigma2")?;
            for i in 0..self.m {
                u[v.log_sigma2 + i] = positive(cv[v.log_sigma2 + i], "sigma2")?;
            }
        }
        Ok(u)
    }

    /// Linear predictor `θ_i` for each training record under a constrained
    /// parameter vector.
    pub fn fitted_theta(&self, c: &ParamVector) -> Result<Vec<f64>> {
        if c.layout != self.layout {
            return Err(Error::Contract("layout does not match the model".into()));
        }
        let get = |n: &str| c.block(n).unwrap_or(&[]);
        let (alpha, a, b, cc, beta) = (
            get("alpha_theta")[0],
            get("theta_a"),
            get("theta_b"),
            get("theta_c"),
            get("beta_theta"),
        );
        Ok((0..self.m)
            .map(|i| {
                let xi = &self.x[i * self.q..(i + 1) * self.q];
                let mut t = alpha + a[self.a_idx[i]] + b[self.b_idx[i]];
                if !cc.is_empty() {
                    t += cc[self.c_idx[i]];
                }
                t + beta.iter().zip(xi).map(|(b, x)| b * x).sum::<f64>()
            })
            .collect())
    }
}

struct GpState {
    sigma_p: f64,
    lp2: f64,
    r: DMatrix<f64>,
    lower: DMatrix<f64>,
    z: DVector<f64>,
    theta: DVector<f64>,
}

impl LogDensity for Model {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(x, Some(grad))
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.eval(x, None)
    }

    fn layout(&self) -> Layout {
        self.layout.clone()
    }

    fn constrain(&self, x: &[f64], out: &mut [f64]) -> bool {
        self.constrain_into(x, out).is_ok()
    }
}

/// `ln N(x; mean, var)`.
#[inline]
pub fn normal_ln_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -LN_SQRT_2PI - 0.5 * var.ln() - 0.5 * d * d / var
}

/// Half-Cauchy log-density `ln(2 / (πη(1 + (x/η)²)))` for `x ≥ 0`.
#[inline]
pub fn half_cauchy_ln_pdf(x: f64, eta: f64) -> f64 {
    let r = x / eta;
    (2.0 / (PI * eta)).ln() - r.ln_1p_sq()
}

/// Half-Cauchy log-density of `e^w` plus the log-Jacobian `w`.
#[inline]
pub fn log_half_cauchy_unconstrained(w: f64, eta: f64) -> f64 {
    half_cauchy_ln_pdf(w.exp(), eta) + w
}

#[inline]
fn d_log_half_cauchy_unconstrained(w: f64, eta: f64) -> f64 {
    let r2 = (w.exp() / eta).powi(2);
    1.0 - 2.0 * r2 / (1.0 + r2)
}

trait Ln1pSq {
    fn ln_1p_sq(self) -> f64;
}

impl Ln1pSq for f64 {
    /// `ln(1 + x²)` without overflow for large `x`.
    #[inline]
    fn ln_1p_sq(self) -> f64 {
        let a = self.abs();
        if a > 1e150 {
            2.0 * a.ln()
        } else {
            (a * a).ln_1p()
        }
    }
}
