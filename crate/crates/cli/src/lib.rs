//! Command-line pipeline around `stream-meta`.
//!
//! Subcommands read one JSON [`config::RunConfig`]; flags override its
//! fields. Every output is written atomically and each invocation leaves a
//! `manifest_<command>.json` with the config digest, seed, version and wall
//! time.

pub mod config;
pub mod pipeline;

use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{ConfigError, Overrides, RunConfig};
use pipeline::Outcome;

/// Exit status for configuration problems.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for numerical or sampler failures.
pub const EXIT_NUMERICAL: i32 = 3;
/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "STREAM_META_THREADS";

#[derive(Debug, Parser)]
#[command(name = "stream-meta", version, about = "Hierarchical meta-analysis of experiment streams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Model kind: FE, FE-M, FE-MV, RE, RE-M, RE-MV, RE-GP or STREAM.
    #[arg(long, global = true, value_name = "KIND")]
    pub model: Option<String>,
    /// Simulation scenario: i, ii, iii or iv.
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    #[arg(long, global = true)]
    pub chains: Option<usize>,
    #[arg(long, global = true)]
    pub warmup: Option<usize>,
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Dataset CSV, split by time into train and test.
    #[arg(long, global = true, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Pre-split training CSV.
    #[arg(long, global = true, value_name = "PATH")]
    pub train: Option<PathBuf>,
    /// Test CSV.
    #[arg(long, global = true, value_name = "PATH")]
    pub test: Option<PathBuf>,
    /// Truth CSV with columns id, theta_true, sigma2_true.
    #[arg(long, global = true, value_name = "PATH")]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate synthetic datasets and their ground truth.
    Simulate,
    /// Sample the posterior; writes per-chain draw CSVs and a binary cache.
    Fit,
    /// Posterior predictive draws and forecast summaries for the test set.
    Predict,
    /// Score forecast summaries (MAPE, scaled MSE, interval score).
    Evaluate,
    /// Gelman-Rubin diagnostics; exits 0 only when converged.
    Diagnose {
        /// Chain CSVs (default: the fit's own draws).
        draws: Vec<PathBuf>,
    },
    /// Group-effect and time-effect summary CSVs.
    Report,
    /// fit, predict, evaluate, diagnose and report in one go (simulating
    /// data first when none is configured).
    Pipeline,
    /// Fit several models to simulated replications and tabulate scores.
    Compare,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::Diagnose { .. } => "diagnose",
            Command::Report => "report",
            Command::Pipeline => "pipeline",
            Command::Compare => "compare",
        }
    }
}

/// Effective configuration: file (if any) with flags applied.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let g = &cli.global;
    let draws = match &cli.command {
        Command::Diagnose { draws } => draws.clone(),
        _ => Vec::new(),
    };
    cfg.apply(&Overrides {
        seed: g.seed,
        out: g.out.clone(),
        model: g.model.clone(),
        scenario: g.scenario.clone(),
        reps: g.reps,
        chains: g.chains,
        warmup: g.warmup,
        samples: g.samples,
        data: g.data.clone(),
        train: g.train.clone(),
        test: g.test.clone(),
        truth: g.truth.clone(),
        draws,
    });
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a RunConfig,
    started_unix: u64,
    wall_time_seconds: f64,
    outputs: Vec<String>,
}

/// Runs one subcommand on an already-resolved configuration.
pub fn execute(command: &Command, cfg: &RunConfig) -> Result<Outcome> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let mut outcome = match command {
        Command::Simulate => pipeline::simulate(cfg),
        Command::Fit => pipeline::fit(cfg),
        Command::Predict => pipeline::predict(cfg),
        Command::Evaluate => pipeline::evaluate(cfg),
        Command::Diagnose { .. } => pipeline::diagnose(cfg),
        Command::Report => pipeline::report(cfg),
        Command::Pipeline => pipeline::pipeline(cfg),
        Command::Compare => pipeline::compare(cfg),
    }?;
    let name = command.name();
    let manifest = Manifest {
        command: name,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_sha256: cfg.digest(),
        config: cfg,
        started_unix: started,
        wall_time_seconds: clock.elapsed().as_secs_f64(),
        outputs: outcome.files.iter().map(|p| p.display().to_string()).collect(),
    };
    std::fs::create_dir_all(&cfg.output.dir)?;
    let path = cfg.output.dir.join(format!("manifest_{name}.json"));
    stream_meta::io::atomic_write(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest).map_err(std::io::Error::from)?;
        Ok(())
    })?;
    outcome.files.push(path);
    Ok(outcome)
}

/// Caps the global thread pool from [`THREADS_ENV`].
pub fn configure_threads() -> Result<(), ConfigError> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    // a pool may already exist when embedded; that is not an error
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Process exit status for an error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<stream_meta::Error>() {
            if e.is_numerical() {
                return EXIT_NUMERICAL;
            }
        }
    }
    1
}

/// Parses, runs, reports; returns the process exit status.
pub fn main_with(cli: Cli) -> i32 {
    let run = || -> Result<Outcome> {
        configure_threads()?;
        let cfg = resolve_config(&cli)?;
        execute(&cli.command, &cfg)
    };
    match run() {
        Ok(outcome) => {
            for note in &outcome.notes {
                println!("{note}");
            }
            if outcome.success {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
