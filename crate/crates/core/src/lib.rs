//! Bayesian hierarchical meta-analysis of online controlled experiments.
//!
//! Mean and variance shrinkage across two grouping factors plus an optional
//! periodic Gaussian-process time trend, fitted with Hamiltonian Monte Carlo.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod io;
pub mod kernel;
pub mod model;
pub mod predict;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod simulate;

pub use data::{load_dataset, split_by_time, ColumnMap, Dataset, ExperimentRecord, LevelMaps};
pub use diagnostics::{convergence_report, gelman_rubin, ConvergenceReport, DiagnoseOptions};
pub use error::{Error, Result};
pub use eval::{hpd_interval, interval_score, mape, scaled_mse, ScoreReport};
pub use kernel::KernelParams;
pub use model::{Model, ModelKind, ModelSpec, ParamVector, PriorConfig};
pub use predict::{predict_y, PredictionTask, Predictions};
pub use sampler::{run_chains, sample, LogDensity, PosteriorDraws, SamplerConfig};
pub use simulate::{generate_dataset, scenario_params, Scenario, ScenarioConfig, Truth};
