//! Subcommand implementations. Every function validates the configuration
//! before creating or writing any file.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stream_meta::data::write_dataset;
use stream_meta::diagnostics::convergence_report;
use stream_meta::eval::{score, ScoreReport};
use stream_meta::io::{atomic_write, chain_file_name, read_cache_file, read_chain_csvs, write_draws, CACHE_FILE};
use stream_meta::predict::{summarize, write_predictions, write_summary, read_summary, ForecastSummary};
use stream_meta::report::emit_report;
use stream_meta::simulate::{read_truth, write_truth};
use stream_meta::{
    generate_dataset, load_dataset, predict_y, run_chains, split_by_time, ColumnMap, ConvergenceReport, Dataset,
    DiagnoseOptions, Model, ModelKind, ModelSpec, PosteriorDraws, PredictionTask, SamplerConfig, Truth,
};

use crate::config::{rep_seed, ConfigError, RunConfig};

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const MODEL_FILE: &str = "model.json";
pub const DRAWS_DIR: &str = "draws";
pub const FIT_STATS_FILE: &str = "fit_stats.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SCORES_FILE: &str = "scores.json";
pub const CONVERGENCE_FILE: &str = "convergence.json";
pub const REPORT_DIR: &str = "report";
pub const DATASET_FILE: &str = "dataset.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const COMPARE_FILE: &str = "compare.csv";
pub const COMPARE_SUMMARY_FILE: &str = "compare_summary.csv";

/// Files produced by a subcommand plus human-readable notes.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
    /// `false` only for a non-converged `diagnose`.
    pub success: bool,
}

impl Outcome {
    fn ok(files: Vec<PathBuf>) -> Outcome {
        Outcome { files, notes: Vec::new(), success: true }
    }

    fn absorb(&mut self, other: Outcome) {
        self.files.extend(other.files);
        self.notes.extend(other.notes);
        self.success &= other.success;
    }
}

pub fn rep_dir(out: &Path, rep: usize) -> PathBuf {
    out.join(format!("rep_{}", rep + 1))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::from)?;
        std::io::Write::write_all(w, b"\n")?;
        Ok(())
    })?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    atomic_write(path, |w| write_dataset(w, d))?;
    Ok(())
}

/// A dataset whose level maps and time grid come from its own records only.
pub fn standalone(d: &Dataset) -> Result<Dataset> {
    Ok(Dataset::new(d.records().to_vec())?)
}

fn load(path: &Path, columns: &ColumnMap, log: bool) -> Result<Dataset> {
    let d = load_dataset(path, columns).with_context(|| format!("loading {}", path.display()))?;
    Ok(if log { d.log_transformed()? } else { d })
}

// ---------------------------------------------------------------- simulate

pub fn simulate(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let scenarios = (0..cfg.simulation.reps)
        .map(|r| cfg.scenario_config(r))
        .collect::<Result<Vec<_>, ConfigError>>()?;
    let mut files = Vec::new();
    for (r, sc) in scenarios.iter().enumerate() {
        let dir = rep_dir(&cfg.output.dir, r);
        fs::create_dir_all(&dir)?;
        let (d, truth) = generate_dataset(sc)?;
        let (dp, tp) = (dir.join(DATASET_FILE), dir.join(TRUTH_FILE));
        save_dataset(&dp, &d)?;
        atomic_write(&tp, |w| write_truth(w, &truth))?;
        files.extend([dp, tp]);
    }
    Ok(Outcome::ok(files))
}

// --------------------------------------------------------------------- fit

/// Sampler statistics recorded next to the draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub model: String,
    pub dim: usize,
    pub chains: Vec<ChainStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub accept_rate: f64,
    pub step_size: f64,
    pub divergences: usize,
}

/// Train and (optional) test sets named by the config.
pub fn load_inputs(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let (cols, log) = (&cfg.data.columns, cfg.data.log_transform);
    if let Some(train) = &cfg.data.train {
        let test = cfg.data.test.as_deref().map(|p| load(p, cols, log)).transpose()?;
        return Ok((load(train, cols, log)?, test));
    }
    let Some(path) = &cfg.data.dataset else {
        return Err(ConfigError("data: set data.dataset (or data.train) or pass --data".into()).into());
    };
    let d = load(path, cols, log)?;
    let (train, test) = split_by_time(&d, cfg.split.train_fraction)?;
    Ok((standalone(&train)?, Some(test)))
}

/// Samples the posterior of `spec` given `train`.
pub fn fit_model(train: &Dataset, spec: &ModelSpec, sampler: &SamplerConfig) -> Result<PosteriorDraws> {
    let model = Model::new(train, spec)?;
    Ok(run_chains(&model, sampler)?)
}

pub fn fit(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    let sampler = cfg.sampler_config()?;
    cfg.check_inputs(&[("data.dataset", &cfg.data.dataset), ("data.train", &cfg.data.train), ("data.test", &cfg.data.test)])?;
    let (train, test) = load_inputs(cfg)?;
    let draws = fit_model(&train, &spec, &sampler)?;

    let out = &cfg.output.dir;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let p = out.join(TRAIN_FILE);
    save_dataset(&p, &train)?;
    files.push(p);
    if let Some(test) = &test {
        let p = out.join(TEST_FILE);
        save_dataset(&p, test)?;
        files.push(p);
    }
    let p = out.join(MODEL_FILE);
    write_json(&p, &spec)?;
    files.push(p);
    files.extend(write_draws(out.join(DRAWS_DIR), &draws)?);
    let stats = FitStats {
        model: spec.kind.to_string(),
        dim: draws.dim(),
        chains: draws
            .chains
            .iter()
            .map(|c| ChainStats { accept_rate: c.accept_rate, step_size: c.step_size, divergences: c.divergences })
            .collect(),
    };
    let p = out.join(FIT_STATS_FILE);
    write_json(&p, &stats)?;
    files.push(p);
    Ok(Outcome::ok(files))
}

// ----------------------------------------------------------------- predict

fn fitted_spec(out: &Path) -> Result<ModelSpec> {
    read_json(&out.join(MODEL_FILE)).context("no fitted model found; run `fit` first")
}

pub fn predict(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    cfg.check_inputs(&[("data.test", &cfg.data.test)])?;
    let out = &cfg.output.dir;
    let spec = fitted_spec(out)?;
    let cols = ColumnMap::default();
    let train = load(&out.join(TRAIN_FILE), &cols, false)?;
    let test = match &cfg.data.test {
        Some(p) => load(p, &cfg.data.columns, cfg.data.log_transform)?,
        None => load(&out.join(TEST_FILE), &cols, false).context("no test set; pass --test")?,
    };
    let draws = read_cache_file(out.join(DRAWS_DIR).join(CACHE_FILE))?;
    let task = PredictionTask { train: &train, test: &test, draws: &draws, spec: &spec, seed: cfg.seed };
    let pred = predict_y(&task)?;
    let rows = summarize(&test, &pred, cfg.evaluation.alpha)?;
    let (pp, sp) = (out.join(PREDICTIONS_FILE), out.join(SUMMARY_FILE));
    atomic_write(&pp, |w| write_predictions(w, &test, &pred))?;
    atomic_write(&sp, |w| write_summary(w, &rows))?;
    Ok(Outcome::ok(vec![pp, sp]))
}

// ---------------------------------------------------------------- evaluate

/// Scores forecasts against truth: the median of `θ̃` as the point
/// forecast, the HPD interval of `ỹ` as the interval.
pub fn score_forecasts(rows: &[ForecastSummary], truth: &HashMap<String, f64>, alpha: f64) -> Result<ScoreReport> {
    let mut t = Vec::with_capacity(rows.len());
    for r in rows {
        match truth.get(&r.test_id) {
            Some(&v) => t.push(v),
            None => bail!("no truth value for test id `{}`", r.test_id),
        }
    }
    let pred: Vec<f64> = rows.iter().map(|r| r.theta_median).collect();
    let lower: Vec<f64> = rows.iter().map(|r| r.lower).collect();
    let upper: Vec<f64> = rows.iter().map(|r| r.upper).collect();
    Ok(score(&t, &pred, &lower, &upper, alpha)?)
}

pub fn truth_map(truth: &[Truth]) -> HashMap<String, f64> {
    truth.iter().map(|t| (t.id.clone(), t.theta_true)).collect()
}

pub fn score_line(s: &ScoreReport) -> String {
    format!(
        "MAPE {:.4}  scaled MSE {:.6}  IS {:.4}  (alpha {}, n {})",
        s.mape, s.scaled_mse, s.interval_score, s.alpha, s.n_eval
    )
}

pub fn evaluate(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    cfg.check_inputs(&[("data.truth", &cfg.data.truth)])?;
    let out = &cfg.output.dir;
    let rows = read_summary(out.join(SUMMARY_FILE)).context("no forecast summary; run `predict` first")?;
    let mut notes = Vec::new();
    let truth = match &cfg.data.truth {
        Some(p) => truth_map(&read_truth(p)?),
        None => {
            notes.push("no truth file given; scoring against the observed test effects".to_string());
            let test = load(&out.join(TEST_FILE), &ColumnMap::default(), false)?;
            test.records().iter().map(|r| (r.id.clone(), r.y)).collect()
        }
    };
    let report = score_forecasts(&rows, &truth, cfg.evaluation.alpha)?;
    let p = out.join(SCORES_FILE);
    write_json(&p, &report)?;
    notes.push(score_line(&report));
    Ok(Outcome { files: vec![p], notes, success: true })
}

// ---------------------------------------------------------------- diagnose

pub fn diagnose_options(cfg: &RunConfig) -> DiagnoseOptions {
    DiagnoseOptions {
        threshold: cfg.evaluation.r_hat_threshold,
        split: cfg.evaluation.split_r_hat,
        exclude_latent_variances: cfg.evaluation.exclude_latent_variances,
    }
}

/// The fit's chain CSVs in chain order.
fn default_chain_files(out: &Path) -> Result<Vec<PathBuf>> {
    let dir = out.join(DRAWS_DIR);
    let mut files = Vec::new();
    while dir.join(chain_file_name(files.len())).exists() {
        files.push(dir.join(chain_file_name(files.len())));
    }
    if files.is_empty() {
        bail!("no chain files in {}; run `fit` first or pass draw files", dir.display());
    }
    Ok(files)
}

pub fn diagnose(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    cfg.check_inputs(&[])?;
    let paths = if cfg.data.draws.is_empty() { default_chain_files(&cfg.output.dir)? } else { cfg.data.draws.clone() };
    let draws = read_chain_csvs(&paths)?;
    let report = convergence_report(&draws, &diagnose_options(cfg))?;
    fs::create_dir_all(&cfg.output.dir)?;
    let p = cfg.output.dir.join(CONVERGENCE_FILE);
    write_json(&p, &report)?;
    let worst = report
        .r_hat
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, _)| n.as_str())
        .unwrap_or("-");
    Ok(Outcome {
        files: vec![p],
        notes: vec![format!(
            "R-hat median {:.4}  max {:.4} ({worst})  threshold {}  {}",
            report.median_r_hat,
            report.max_r_hat,
            report.threshold,
            if report.converged { "converged" } else { "NOT converged" }
        )],
        success: report.converged,
    })
}

// ------------------------------------------------------------------ report

pub fn report(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let out = &cfg.output.dir;
    let spec = fitted_spec(out)?;
    let train = load(&out.join(TRAIN_FILE), &ColumnMap::default(), false)?;
    let draws = read_cache_file(out.join(DRAWS_DIR).join(CACHE_FILE))?;
    let (files, notes) = emit_report(&draws, &train, &spec, cfg.evaluation.alpha, out.join(REPORT_DIR))?;
    Ok(Outcome { files, notes, success: true })
}

// ---------------------------------------------------------------- pipeline

/// The same configuration pointed at replication `rep`'s directory and seed.
fn for_rep(cfg: &RunConfig, rep: usize) -> RunConfig {
    let mut c = cfg.clone();
    let dir = rep_dir(&cfg.output.dir, rep);
    c.seed = rep_seed(cfg.seed, rep);
    c.data.dataset = Some(dir.join(DATASET_FILE));
    c.data.truth = Some(dir.join(TRUTH_FILE));
    c.data.train = None;
    c.data.test = None;
    c.data.draws = Vec::new();
    c.data.columns = ColumnMap::default();
    c.data.log_transform = false;
    c.output.dir = dir;
    c
}

/// fit → predict → evaluate → diagnose → report on the configured data, or
/// on freshly simulated replications when no data is configured.
pub fn pipeline(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    cfg.check_inputs(&[("data.dataset", &cfg.data.dataset), ("data.train", &cfg.data.train), ("data.test", &cfg.data.test), ("data.truth", &cfg.data.truth)])?;
    let mut all = Outcome::ok(Vec::new());
    let runs: Vec<RunConfig> = if cfg.data.dataset.is_some() || cfg.data.train.is_some() {
        vec![cfg.clone()]
    } else {
        all.absorb(simulate(cfg)?);
        (0..cfg.simulation.reps).map(|r| for_rep(cfg, r)).collect()
    };
    for c in &runs {
        all.absorb(fit(c)?);
        all.absorb(predict(c)?);
        all.absorb(evaluate(c)?);
        all.absorb(diagnose(c)?);
        all.absorb(report(c)?);
    }
    // a non-converged replication is reported, not fatal, for the pipeline
    all.success = true;
    Ok(all)
}

// ----------------------------------------------------------------- compare

/// One model fitted to one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub rep: usize,
    pub model: String,
    pub mape: f64,
    pub scaled_mse: f64,
    pub interval_score: f64,
    pub max_r_hat: f64,
    pub median_r_hat: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub model: String,
    pub median_mape: f64,
    pub median_scaled_mse: f64,
    pub median_interval_score: f64,
    pub reps: usize,
    pub reps_converged: usize,
}

/// Scores and convergence of one model on one train/test split.
pub fn evaluate_model(
    train: &Dataset,
    test: &Dataset,
    truth: &HashMap<String, f64>,
    spec: &ModelSpec,
    sampler: &SamplerConfig,
    alpha: f64,
    diag: &DiagnoseOptions,
) -> Result<(ScoreReport, ConvergenceReport)> {
    let draws = fit_model(train, spec, sampler)?;
    let task = PredictionTask { train, test, draws: &draws, spec, seed: sampler.seed };
    let pred = predict_y(&task)?;
    let rows = summarize(test, &pred, alpha)?;
    let scores = score_forecasts(&rows, truth, alpha)?;
    let conv = convergence_report(&draws, diag)?;
    Ok((scores, conv))
}

/// Fits every listed model to replication `rep` of the configured scenario.
pub fn compare_rep(cfg: &RunConfig, rep: usize, models: &[ModelKind]) -> Result<Vec<CompareRow>> {
    let sc = cfg.scenario_config(rep)?;
    let (d, truth) = generate_dataset(&sc)?;
    let (train, test) = split_by_time(&d, cfg.split.train_fraction)?;
    let train = standalone(&train)?;
    let truth = truth_map(&truth);
    let mut sampler = cfg.sampler_config()?;
    sampler.seed = sc.seed;
    let diag = diagnose_options(cfg);
    let mut rows = Vec::with_capacity(models.len());
    for &kind in models {
        let spec = ModelSpec { kind, ..cfg.model_spec()? };
        let (s, c) = evaluate_model(&train, &test, &truth, &spec, &sampler, cfg.evaluation.alpha, &diag)
            .with_context(|| format!("replication {} model {kind}", rep + 1))?;
        rows.push(CompareRow {
            rep: rep + 1,
            model: kind.to_string(),
            mape: s.mape,
            scaled_mse: s.scaled_mse,
            interval_score: s.interval_score,
            max_r_hat: c.max_r_hat,
            median_r_hat: c.median_r_hat,
            converged: c.converged,
        });
    }
    Ok(rows)
}

pub fn median(v: &[f64]) -> f64 {
    stream_meta::eval::median(v)
}

pub fn summarize_compare(rows: &[CompareRow], models: &[ModelKind]) -> Vec<CompareSummary> {
    models
        .iter()
        .map(|k| {
            let mine: Vec<&CompareRow> = rows.iter().filter(|r| r.model == k.name()).collect();
            let col = |f: fn(&CompareRow) -> f64| median(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            CompareSummary {
                model: k.to_string(),
                median_mape: col(|r| r.mape),
                median_scaled_mse: col(|r| r.scaled_mse),
                median_interval_score: col(|r| r.interval_score),
                reps: mine.len(),
                reps_converged: mine.iter().filter(|r| r.converged).count(),
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    atomic_write(path, |w| {
        let mut wr = csv::Writer::from_writer(w);
        for r in rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    })?;
    Ok(())
}

pub fn compare(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let models = cfg.compare_models()?;
    let mut rows = Vec::new();
    for rep in 0..cfg.simulation.reps {
        rows.extend(compare_rep(cfg, rep, &models)?);
    }
    let summary = summarize_compare(&rows, &models);
    fs::create_dir_all(&cfg.output.dir)?;
    let (rp, sp) = (cfg.output.dir.join(COMPARE_FILE), cfg.output.dir.join(COMPARE_SUMMARY_FILE));
    write_csv(&rp, &rows)?;
    write_csv(&sp, &summary)?;
    let notes = summary
        .iter()
        .map(|s| {
            format!(
                "{:7} MAPE {:9.3}  MSE {:9.4}  IS {:9.3}  converged {}/{}",
                s.model, s.median_mape, s.median_scaled_mse, s.median_interval_score, s.reps_converged, s.reps
            )
        })
        .collect();
    Ok(Outcome { files: vec![rp, sp], notes, success: true })
}
