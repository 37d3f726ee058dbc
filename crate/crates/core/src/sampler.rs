//! Hamiltonian Monte Carlo with a jittered number of leapfrog steps,
//! dual-averaging step-size adaptation and windowed diagonal mass-matrix
//! adaptation during warmup.
//!
//! Chains are independent and run in parallel; chain `c` draws from the RNG
//! stream derived from `(seed, c)`, so output depends only on the config.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Layout;
use crate::rng::{derive_rng, tag};

/// A differentiable log-density on an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the log-density. Invalid
    /// states return `-inf`.
    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.log_density_and_grad(x, &mut g)
    }

    /// Layout of the constrained draws.
    fn layout(&self) -> Layout {
        let mut l = Layout::new();
        l.push("x", self.dim());
        l
    }

    /// Maps an unconstrained point to the stored (constrained) values.
    fn constrain(&self, x: &[f64], out: &mut [f64]) -> bool {
        out.copy_from_slice(x);
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    /// Nominal trajectory length; each iteration draws uniformly from
    /// `[⌈L/2⌉, ⌊3L/2⌋]`.
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    pub seed: u64,
    /// Adapt a diagonal mass matrix during warmup.
    pub adapt_mass: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup: 2000,
            samples: 8000,
            leapfrog_steps: 32,
            target_accept: 0.8,
            seed: 0,
            adapt_mass: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Contract("chains must be at least 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::Contract("samples must be at least 1".into()));
        }
        if self.leapfrog_steps == 0 {
            return Err(Error::Contract("leapfrog_steps must be at least 1".into()));
        }
        if self.warmup > 0 && self.warmup < 100 {
            return Err(Error::Contract(format!(
                "warmup must be 0 or at least 100 for adaptation, got {}",
                self.warmup
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Contract("target_accept must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Fraction of post-warmup divergent transitions above which a run is
/// reported as unhealthy.
pub const MAX_DIVERGENT_FRACTION: f64 = 0.25;
/// Energy error beyond which a trajectory counts as divergent.
const DIVERGENCE_THRESHOLD: f64 = 1000.0;
const INIT_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    /// `samples × dim`, row-major, constrained space.
    pub values: Vec<f64>,
    pub accept_rate: f64,
    pub step_size: f64,
    pub divergences: usize,
    pub inv_mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub layout: Layout,
    pub samples: usize,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.layout.param_names()
    }

    pub fn draw(&self, chain: usize, s: usize) -> &[f64] {
        let p = self.dim();
        &self.chains[chain].values[s * p..(s + 1) * p]
    }

    /// Draws pooled in chain order.
    pub fn pooled(&self) -> impl Iterator<Item = &[f64]> + '_ {
        let p = self.dim();
        self.chains
            .iter()
            .flat_map(move |c| c.values.chunks_exact(p.max(1)))
    }

    pub fn n_pooled(&self) -> usize {
        self.samples * self.chains.len()
    }

    pub fn column(&self, chain: usize, j: usize) -> Vec<f64> {
        let p = self.dim();
        self.chains[chain].values[j..].iter().step_by(p).copied().collect()
    }

    pub fn pooled_column(&self, j: usize) -> Vec<f64> {
        (0..self.n_chains()).flat_map(|c| self.column(c, j)).collect()
    }

    pub fn total_divergences(&self) -> usize {
        self.chains.iter().map(|c| c.divergences).sum()
    }
}

/// Result of a leapfrog trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub log_density: f64,
    pub divergent: bool,
}

/// `steps` leapfrog updates under `H(q, p) = −log π(q) + ½|p|²`.
/// `grad` writes `∇ log π(q)` and returns `log π(q)`.
pub fn leapfrog<F>(q: &[f64], p: &[f64], eps: f64, steps: usize, mut grad: F) -> Trajectory
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = q.len();
    let mut q = q.to_vec();
    let mut p = p.to_vec();
    let mut g = vec![0.0; n];
    let mut lp = grad(&q, &mut g);
    let ones = vec![1.0; n];
    let divergent = !integrate(&mut q, &mut p, &mut g, &mut lp, eps, steps, &ones, &mut grad);
    Trajectory {
        q,
        p,
        log_density: lp,
        divergent,
    }
}

/// In-place leapfrog with a diagonal inverse mass. `g`/`lp` must hold the
/// gradient and log-density at `q` on entry and are updated on exit. Returns
/// false if any intermediate state is non-finite.
#[allow(clippy::too_many_arguments)]
fn integrate<F>(
    q: &mut [f64],
    p: &mut [f64],
    g: &mut [f64],
    lp: &mut f64,
    eps: f64,
    steps: usize,
    inv_mass: &[f64],
    grad: &mut F,
) -> bool
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    if steps == 0 || eps == 0.0 {
        return lp.is_finite();
    }
    for (pi, gi) in p.iter_mut().zip(g.iter()) {
        *pi += 0.5 * eps * gi;
    }
    for s in 0..steps {
        for i in 0..q.len() {
            q[i] += eps * inv_mass[i] * p[i];
        }
        *lp = grad(q, g);
        if !lp.is_finite() {
            return false;
        }
        let scale = if s + 1 == steps { 0.5 } else { 1.0 };
        for (pi, gi) in p.iter_mut().zip(g.iter()) {
            *pi += scale * eps * gi;
        }
    }
    p.iter().all(|v| v.is_finite()) && q.iter().all(|v| v.is_finite())
}

/// Dual averaging of the log step size toward a target acceptance rate.
#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    t: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            log_eps: eps.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            t: 0.0,
            target,
        }
    }

    fn update(&mut self, accept: f64) {
        self.t += 1.0;
        let w = 1.0 / (self.t + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        self.log_eps = self.mu - self.t.sqrt() / Self::GAMMA * self.h_bar;
        let k = self.t.powf(-Self::KAPPA);
        self.log_eps_bar = k * self.log_eps + (1.0 - k) * self.log_eps_bar;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Running per-coordinate variance.
#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Variance shrunk toward 1e-3, as in Stan's windowed adaptation.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|m2| {
                let var = m2 / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

struct Chain<'a, T: LogDensity + ?Sized> {
    target: &'a T,
    rng: ChaCha8Rng,
    q: Vec<f64>,
    g: Vec<f64>,
    lp: f64,
    inv_mass: Vec<f64>,
    steps: usize,
    // scratch
    q_new: Vec<f64>,
    g_new: Vec<f64>,
    p: Vec<f64>,
}

struct Transition {
    accept_prob: f64,
    divergent: bool,
}

impl<'a, T: LogDensity + ?Sized> Chain<'a, T> {
    fn init(target: &'a T, mut rng: ChaCha8Rng, steps: usize) -> Result<Self> {
        let n = target.dim();
        let mut q = vec![0.0; n];
        let mut g = vec![0.0; n];
        for _ in 0..INIT_RETRIES {
            for v in q.iter_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
            let lp = target.log_density_and_grad(&q, &mut g);
            if lp.is_finite() && g.iter().all(|v| v.is_finite()) {
                return Ok(Chain {
                    target,
                    rng,
                    q,
                    g,
                    lp,
                    inv_mass: vec![1.0; n],
                    steps,
                    q_new: vec![0.0; n],
                    g_new: vec![0.0; n],
                    p: vec![0.0; n],
                });
            }
        }
        Err(Error::Sampler(format!(
            "no finite starting point after {INIT_RETRIES} attempts"
        )))
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(&self.inv_mass)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
    }

    fn draw_momentum(&mut self) {
        for i in 0..self.p.len() {
            let z: f64 = self.rng.sample(StandardNormal);
            self.p[i] = z / self.inv_mass[i].sqrt();
        }
    }

    fn n_steps(&mut self) -> usize {
        let lo = self.steps.div_ceil(2).max(1);
        let hi = (3 * self.steps / 2).max(lo);
        self.rng.random_range(lo..=hi)
    }

    /// Energy change of a single step from the current state.
    fn probe(&mut self, eps: f64) -> f64 {
        self.draw_momentum();
        let h0 = -self.lp + self.kinetic(&self.p);
        self.q_new.copy_from_slice(&self.q);
        self.g_new.copy_from_slice(&self.g);
        let mut lp = self.lp;
        let target = self.target;
        let mut grad = |x: &[f64], g: &mut [f64]| target.log_density_and_grad(x, g);
        let mut p = std::mem::take(&mut self.p);
        let ok = integrate(
            &mut self.q_new,
            &mut p,
            &mut self.g_new,
            &mut lp,
            eps,
            1,
            &self.inv_mass,
            &mut grad,
        );
        let h1 = -lp + self.kinetic(&p);
        self.p = p;
        if ok && h1.is_finite() {
            h0 - h1
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Step-size heuristic: double or halve until the one-step acceptance
    /// probability crosses 1/2.
    fn reasonable_step(&mut self, mut eps: f64) -> f64 {
        let mut dh = self.probe(eps);
        let dir: f64 = if dh > 0.5f64.ln() { 1.0 } else { -1.0 };
        for _ in 0..100 {
            if dir * dh <= dir * 0.5f64.ln() {
                break;
            }
            let next = eps * 2f64.powf(dir);
            if !(1e-10..=1e4).contains(&next) {
                break;
            }
            eps = next;
            dh = self.probe(eps);
        }
        eps
    }

    fn transition(&mut self, eps: f64) -> Transition {
        self.draw_momentum();
        let h0 = -self.lp + self.kinetic(&self.p);
        let steps = self.n_steps();
        self.q_new.copy_from_slice(&self.q);
        self.g_new.copy_from_slice(&self.g);
        let mut lp = self.lp;
        let target = self.target;
        let mut grad = |x: &[f64], g: &mut [f64]| target.log_density_and_grad(x, g);
        let mut p = std::mem::take(&mut self.p);
        let ok = integrate(
            &mut self.q_new,
            &mut p,
            &mut self.g_new,
            &mut lp,
            eps,
            steps,
            &self.inv_mass,
            &mut grad,
        );
        let h1 = -lp + self.kinetic(&p);
        self.p = p;
        let dh = h1 - h0;
        if !ok || !dh.is_finite() || dh > DIVERGENCE_THRESHOLD {
            return Transition {
                accept_prob: 0.0,
                divergent: true,
            };
        }
        let accept_prob = (-dh).exp().min(1.0);
        let u: f64 = self.rng.random();
        if u < accept_prob {
            std::mem::swap(&mut self.q, &mut self.q_new);
            std::mem::swap(&mut self.g, &mut self.g_new);
            self.lp = lp;
        }
        Transition {
            accept_prob,
            divergent: false,
        }
    }
}

/// Iteration boundaries `[init, w1, w2, term]` of the warmup schedule: step
/// size only until `init`, metric windows ending at `w1` and `w2`, then a
/// final step-size-only stretch.
fn warmup_schedule(warmup: usize) -> [usize; 3] {
    let init = (warmup * 15) / 100;
    let w1 = (warmup * 40) / 100;
    let w2 = (warmup * 85) / 100;
    [init, w1, w2]
}

fn run_chain<T: LogDensity + ?Sized>(
    target: &T,
    cfg: &SamplerConfig,
    chain: usize,
) -> Result<ChainDraws> {
    let rng = derive_rng(cfg.seed, &[tag("chain"), chain as u64]);
    let mut ch = Chain::init(target, rng, cfg.leapfrog_steps)?;
    let dim = target.dim();

    let mut eps = ch.reasonable_step(1.0);
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let [init, w1, w2] = warmup_schedule(cfg.warmup);
    let mut window = Welford::new(dim);
    for it in 0..cfg.warmup {
        let tr = ch.transition(da.current());
        da.update(tr.accept_prob);
        if cfg.adapt_mass && it >= init && it < w2 {
            window.push(&ch.q);
            if it + 1 == w1 || it + 1 == w2 {
                ch.inv_mass = window.regularized_variance();
                window = Welford::new(dim);
                eps = ch.reasonable_step(da.current());
                da = DualAveraging::new(eps, cfg.target_accept);
            }
        }
    }
    if cfg.warmup > 0 {
        eps = da.final_step();
    }

    let mut values = vec![0.0; cfg.samples * dim];
    let mut accept_sum = 0.0;
    let mut divergences = 0;
    for s in 0..cfg.samples {
        let tr = ch.transition(eps);
        accept_sum += tr.accept_prob;
        divergences += tr.divergent as usize;
        let row = &mut values[s * dim..(s + 1) * dim];
        if !target.constrain(&ch.q, row) || row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampler(format!(
                "chain {chain}: non-finite constrained draw at iteration {s}"
            )));
        }
    }
    Ok(ChainDraws {
        values,
        accept_rate: accept_sum / cfg.samples as f64,
        step_size: eps,
        divergences,
        inv_mass: ch.inv_mass,
    })
}

/// Runs all chains and returns their draws without judging sampler health.
pub fn sample<T: LogDensity + ?Sized>(target: &T, cfg: &SamplerConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let chains = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(target, cfg, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws {
        layout: target.layout(),
        samples: cfg.samples,
        chains,
    })
}

/// [`sample`], failing when more than a quarter of the post-warmup
/// transitions diverged.
pub fn run_chains<T: LogDensity + ?Sized>(
    target: &T,
    cfg: &SamplerConfig,
) -> Result<PosteriorDraws> {
    let draws = sample(target, cfg)?;
    let total = (cfg.samples * cfg.chains) as f64;
    let frac = draws.total_divergences() as f64 / total;
    if frac > MAX_DIVERGENT_FRACTION {
        return Err(Error::Sampler(format!(
            "{:.1}% of post-warmup transitions diverged",
            100.0 * frac
        )));
    }
    Ok(draws)
}
