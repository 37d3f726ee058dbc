//! The JSON run configuration, command-line overrides, and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stream_meta::eval::DEFAULT_ALPHA;
use stream_meta::{ColumnMap, ModelKind, ModelSpec, PriorConfig, SamplerConfig, Scenario, ScenarioConfig};

/// A configuration problem, reported with exit status 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad<T>(field: &str, msg: impl fmt::Display) -> Result<T, ConfigError> {
    Err(ConfigError(format!("{field}: {msg}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Full dataset, split by time into train and test.
    pub dataset: Option<PathBuf>,
    /// Pre-split inputs; take precedence over `dataset`.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Truth CSV (`id,theta_true,sigma2_true`) for `evaluate`; without it
    /// forecasts are scored against the observed test effects.
    pub truth: Option<PathBuf>,
    /// Chain CSVs for `diagnose`; default: the fit's own draws.
    pub draws: Vec<PathBuf>,
    pub columns: ColumnMap,
    /// Analyse `log y` with delta-method variances `S²/y²`.
    pub log_transform: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset: None,
            train: None,
            test: None,
            truth: None,
            draws: Vec::new(),
            columns: ColumnMap::default(),
            log_transform: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    pub p_e: f64,
    pub priors: PriorConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Stream.name().into(),
            p_e: 12.0,
            priors: PriorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    pub adapt_mass: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        SamplerSection {
            chains: d.chains,
            warmup: d.warmup,
            samples: d.samples,
            leapfrog_steps: d.leapfrog_steps,
            target_accept: d.target_accept,
            adapt_mass: d.adapt_mass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train_fraction: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub alpha: f64,
    /// Restrict R̂ to parameters other than the latent `σ_i²`.
    pub exclude_latent_variances: bool,
    /// Split each chain in half before computing R̂.
    pub split_r_hat: bool,
    pub r_hat_threshold: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            alpha: DEFAULT_ALPHA,
            exclude_latent_variances: false,
            split_r_hat: false,
            r_hat_threshold: stream_meta::diagnostics::DEFAULT_THRESHOLD,
        }
    }
}

/// Synthetic-data settings. Unset sizes fall back to the scenario defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub scenario: String,
    pub reps: usize,
    pub m: Option<usize>,
    pub j: Option<usize>,
    pub k: Option<usize>,
    pub t_min: Option<i64>,
    pub t_max: Option<i64>,
    pub n_min: Option<u64>,
    pub n_max: Option<u64>,
    /// Models fitted by `compare`.
    pub models: Vec<String>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            scenario: "i".into(),
            reps: 1,
            m: None,
            j: None,
            k: None,
            t_min: None,
            t_max: None,
            n_min: None,
            n_max: None,
            models: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub sampler: SamplerSection,
    pub split: SplitSection,
    pub evaluation: EvaluationSection,
    pub simulation: SimulationSection,
    pub output: OutputSection,
}

/// Command-line values that replace config fields when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: Option<String>,
    pub scenario: Option<String>,
    pub reps: Option<usize>,
    pub chains: Option<usize>,
    pub warmup: Option<usize>,
    pub samples: Option<usize>,
    pub data: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub draws: Vec<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError(format!("invalid config JSON: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.output.dir = v.clone();
        }
        if let Some(v) = &o.model {
            self.model.kind = v.clone();
        }
        if let Some(v) = &o.scenario {
            self.simulation.scenario = v.clone();
        }
        if let Some(v) = o.reps {
            self.simulation.reps = v;
        }
        if let Some(v) = o.chains {
            self.sampler.chains = v;
        }
        if let Some(v) = o.warmup {
            self.sampler.warmup = v;
        }
        if let Some(v) = o.samples {
            self.sampler.samples = v;
        }
        if let Some(v) = &o.data {
            self.data.dataset = Some(v.clone());
        }
        if let Some(v) = &o.train {
            self.data.train = Some(v.clone());
        }
        if let Some(v) = &o.test {
            self.data.test = Some(v.clone());
        }
        if let Some(v) = &o.truth {
            self.data.truth = Some(v.clone());
        }
        if !o.draws.is_empty() {
            self.data.draws = o.draws.clone();
        }
    }

    /// SHA-256 of the effective configuration in its canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_kind(&self) -> Result<ModelKind, ConfigError> {
        parse_kind("model.kind", &self.model.kind)
    }

    pub fn model_spec(&self) -> Result<ModelSpec, ConfigError> {
        let spec = ModelSpec {
            kind: self.model_kind()?,
            priors: self.model.priors.clone(),
            p_e: self.model.p_e,
        };
        if !(spec.p_e > 0.0 && spec.p_e.is_finite()) {
            return bad("model.p_e", "must be positive");
        }
        spec.priors.validate().or_else(|e| bad("model.priors", e))?;
        Ok(spec)
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig, ConfigError> {
        let s = &self.sampler;
        let cfg = SamplerConfig {
            chains: s.chains,
            warmup: s.warmup,
            samples: s.samples,
            leapfrog_steps: s.leapfrog_steps,
            target_accept: s.target_accept,
            seed: self.seed,
            adapt_mass: s.adapt_mass,
        };
        cfg.validate().or_else(|e| bad("sampler", e))?;
        Ok(cfg)
    }

    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        self.simulation
            .scenario
            .parse()
            .or_else(|_| bad("simulation.scenario", format!("unknown scenario `{}` (expected i, ii, iii or iv)", self.simulation.scenario)))
    }

    /// Generator settings for replication `rep` (0-based).
    pub fn scenario_config(&self, rep: usize) -> Result<ScenarioConfig, ConfigError> {
        let s = &self.simulation;
        let base = stream_meta::scenario_params(self.scenario()?);
        let cfg = ScenarioConfig {
            m: s.m.unwrap_or(base.m),
            j: s.j.unwrap_or(base.j),
            k: s.k.unwrap_or(base.k),
            t_min: s.t_min.unwrap_or(base.t_min),
            t_max: s.t_max.unwrap_or(base.t_max),
            n_min: s.n_min.unwrap_or(base.n_min),
            n_max: s.n_max.unwrap_or(base.n_max),
            seed: rep_seed(self.seed, rep),
            ..base
        };
        cfg.validate().or_else(|e| bad("simulation", e))?;
        Ok(cfg)
    }

    pub fn compare_models(&self) -> Result<Vec<ModelKind>, ConfigError> {
        if self.simulation.models.is_empty() {
            return Ok(ModelKind::ALL.to_vec());
        }
        self.simulation
            .models
            .iter()
            .map(|m| parse_kind("simulation.models", m))
            .collect()
    }

    /// Checks every field without touching the filesystem.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model_spec()?;
        self.sampler_config()?;
        self.scenario()?;
        if self.simulation.reps == 0 {
            return bad("simulation.reps", "must be at least 1");
        }
        self.compare_models()?;
        let f = self.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return bad("split.train_fraction", format!("must lie in (0, 1), got {f}"));
        }
        let e = &self.evaluation;
        if !(e.alpha > 0.0 && e.alpha < 1.0) {
            return bad("evaluation.alpha", format!("must lie in (0, 1), got {}", e.alpha));
        }
        if !(e.r_hat_threshold >= 1.0 && e.r_hat_threshold.is_finite()) {
            return bad("evaluation.r_hat_threshold", "must be a finite value of at least 1");
        }
        if self.output.dir.as_os_str().is_empty() {
            return bad("output.dir", "must not be empty");
        }
        Ok(())
    }

    /// Fails if any input path named in the config does not exist.
    pub fn check_inputs(&self, needed: &[(&str, &Option<PathBuf>)]) -> Result<(), ConfigError> {
        for (field, p) in needed {
            if let Some(p) = p {
                if !p.exists() {
                    return bad(field, format!("{} does not exist", p.display()));
                }
            }
        }
        for p in &self.data.draws {
            if !p.exists() {
                return bad("data.draws", format!("{} does not exist", p.display()));
            }
        }
        Ok(())
    }
}

fn parse_kind(field: &str, s: &str) -> Result<ModelKind, ConfigError> {
    s.parse().or_else(|_| {
        let names: Vec<&str> = ModelKind::ALL.iter().map(|k| k.name()).collect();
        bad(field, format!("unknown model kind `{s}` (expected one of {})", names.join(", ")))
    })
}

/// Root seed of replication `rep`.
pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    use stream_meta::rng::{derive_seed, tag};
    derive_seed(seed, &[tag("rep"), rep as u64])
}
