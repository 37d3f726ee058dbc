//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs under `cargo test` with a custom harness so every
//! line is printed even when earlier criteria fail.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use stream_meta::diagnostics::{convergence_report, DiagnoseOptions};
use stream_meta::kernel::{gp_condition, BASE_JITTER};
use stream_meta::rng::{derive_seed, tag};
use stream_meta::simulate::observe;
use stream_meta::{
    gelman_rubin, generate_dataset, interval_score, mape, sample, scaled_mse, split_by_time, Dataset,
    ExperimentRecord, KernelParams, LogDensity, Model, ModelKind, ModelSpec, PosteriorDraws, SamplerConfig,
};
use stream_meta_cli::config::RunConfig;
use stream_meta_cli::pipeline::{compare_rep, fit_model, standalone, CompareRow};

type Verdict = Result<String, String>;

// ------------------------------------------------------------ criterion 1

fn toy_dataset(seed: u64) -> Dataset {
    let (m, j, k, l) = (6usize, 3usize, 2usize, 4usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times: Vec<f64> = (1..=24).map(f64::from).collect();
    for i in (1..times.len()).rev() {
        times.swap(i, rng.random_range(0..=i));
    }
    let recs = (0..m)
        .map(|i| ExperimentRecord {
            id: format!("e{i}"),
            y: rng.random_range(-1.0..2.0),
            s2: rng.random_range(0.3..2.0),
            n: rng.random_range(3..30),
            t: times[i % l],
            group_a: format!("a{}", i % j),
            group_b: format!("b{}", i % k),
            x: vec![rng.random_range(-1.0..1.0)],
        })
        .collect();
    Dataset::new(recs).unwrap()
}

fn gradients() -> Verdict {
    let (mut worst, mut checked) = (0f64, 0usize);
    for kind in ModelKind::ALL {
        for ds in 0..5u64 {
            let d = toy_dataset(1000 + ds);
            let model = Model::new(&d, &ModelSpec::new(kind)).unwrap();
            let dim = model.layout().dim();
            for pt in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(ds * 100 + pt);
                let u: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g = model.grad_log_posterior(&u).unwrap();
                for i in 0..dim {
                    let h = 1e-5;
                    let (mut up, mut dn) = (u.clone(), u.clone());
                    up[i] += h;
                    dn[i] -= h;
                    let fd = (model.log_posterior(&up) - model.log_posterior(&dn)) / (2.0 * h);
                    let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8 / 1e-5);
                    worst = worst.max(err);
                    if (g[i] - fd).abs() > 1e-5 * g[i].abs().max(fd.abs()) + 1e-8 {
                        return Err(format!("{kind} dataset {ds} point {pt} coord {i}: analytic {} vs FD {fd}", g[i]));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} partial derivatives within rel 1e-5 (abs floor 1e-8); worst scaled error {worst:.1e}"))
}

// ------------------------------------------------------------ criterion 2

fn kern(t: f64, s: f64, s2: f64, l: f64) -> f64 {
    let v = (std::f64::consts::PI * (t - s).abs() / 12.0).sin();
    s2 * (-2.0 * v * v / (l * l)).exp()
}

/// `l` integer months in 1..=24 with distinct month-of-year. Times that
/// coincide modulo the period make the training block singular up to jitter,
/// and the conditional is then fixed only to about cond·ε, far above 1e-8.
fn month_times(l: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut months: Vec<i64> = (1..=12).collect();
    for i in (1..months.len()).rev() {
        months.swap(i, rng.random_range(0..=i));
    }
    months[..l].iter().map(|&m| (m + 12 * rng.random_range(0..=1i64)) as f64).collect()
}

fn gp_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0f64;
    for case in 0..50 {
        let l = rng.random_range(1..=5usize);
        let lt = rng.random_range(1..=3usize);
        let tr = month_times(l, &mut rng);
        let te: Vec<f64> = (0..lt).map(|_| rng.random_range(1..=30i64) as f64).collect();
        let v: Vec<f64> = (0..l).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (s2, lp) = (rng.random_range(0.1..3.0), rng.random_range(0.5..2.0));
        let got = gp_condition(&tr, &v, &te, &KernelParams::new(s2, lp, 12.0).unwrap()).map_err(|e| e.to_string())?;
        // joint covariance, then the textbook conditional with an explicit
        // (Newton-refined) inverse of the jittered training block
        let all: Vec<f64> = tr.iter().chain(&te).copied().collect();
        let joint = DMatrix::from_fn(all.len(), all.len(), |i, j| kern(all[i], all[j], s2, lp));
        let mut k11 = joint.view((0, 0), (l, l)).into_owned();
        for i in 0..l {
            k11[(i, i)] += BASE_JITTER * s2;
        }
        let k12 = joint.view((0, l), (l, lt)).into_owned();
        let k22 = joint.view((l, l), (lt, lt)).into_owned();
        let x0 = k11.clone().try_inverse().ok_or("singular oracle block")?;
        let inv = &x0 + &x0 * (DMatrix::identity(l, l) - &k11 * &x0);
        let mean = k12.transpose() * &inv * DVector::from_column_slice(&v);
        let cov = k22 - k12.transpose() * inv * k12;
        let err = (&got.mean - mean).amax().max((&got.cov - cov).amax());
        worst = worst.max(err);
        if err > 1e-8 {
            return Err(format!("case {case}: max abs error {err:.2e}"));
        }
    }
    Ok(format!("50 cases (integer months, distinct month-of-year), max abs error {worst:.1e} (tolerance 1e-8)"))
}

// ------------------------------------------------------------ criterion 3

struct Gaussian {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
}

impl LogDensity for Gaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn log_density_and_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        let d = DVector::from_column_slice(x) - &self.mean;
        let pd = &self.precision * &d;
        g.iter_mut().zip(pd.iter()).for_each(|(g, v)| *g = -v);
        -0.5 * d.dot(&pd)
    }
}

/// Effective sample size, initial positive sequence, summed over chains.
fn ess(chains: &[Vec<f64>]) -> f64 {
    chains
        .iter()
        .map(|c| {
            let n = c.len();
            let m = c.iter().sum::<f64>() / n as f64;
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let rho = |lag: usize| (0..n - lag).map(|i| (c[i] - m) * (c[i + lag] - m)).sum::<f64>() / ((n - 1) as f64 * v);
            let (mut tau, mut lag) = (1.0, 1);
            while lag + 1 < n {
                let pair = rho(lag) + rho(lag + 1);
                if pair <= 0.0 {
                    break;
                }
                tau += 2.0 * pair;
                lag += 2;
            }
            n as f64 / tau
        })
        .sum()
}

fn ks(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn calibrated(name: &str, d: &PosteriorDraws, mean: &DVector<f64>, var: &[f64]) -> Result<f64, String> {
    let mut worst_ks = 0f64;
    for j in 0..mean.len() {
        let chains: Vec<Vec<f64>> = (0..d.n_chains()).map(|c| d.column(c, j)).collect();
        let pooled: Vec<f64> = chains.concat();
        let n = pooled.len() as f64;
        let m = pooled.iter().sum::<f64>() / n;
        let v = pooled.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        let se_m = (var[j] / ess(&chains)).sqrt();
        let sq: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|x| (x - mean[j]).powi(2)).collect()).collect();
        let se_v = (2.0 * var[j] * var[j] / ess(&sq)).sqrt();
        if (m - mean[j]).abs() >= 3.0 * se_m {
            return Err(format!("{name} coord {j}: mean {m:.4} vs {:.4} (3 SE = {:.4})", mean[j], 3.0 * se_m));
        }
        if (v - var[j]).abs() >= 3.0 * se_v {
            return Err(format!("{name} coord {j}: var {v:.4} vs {:.4} (3 SE = {:.4})", var[j], 3.0 * se_v));
        }
        let nd = Normal::new(mean[j], var[j].sqrt()).unwrap();
        let k = ks(&pooled, |x| nd.cdf(x));
        if k >= 0.02 {
            return Err(format!("{name} coord {j}: KS {k:.4}"));
        }
        worst_ks = worst_ks.max(k);
    }
    Ok(worst_ks)
}

fn sampler_calibration() -> Verdict {
    let cfg = |seed| SamplerConfig { chains: 4, warmup: 2000, samples: 5000, seed, ..Default::default() };
    let std10 = Gaussian { mean: DVector::zeros(10), precision: DMatrix::identity(10, 10) };
    let d = sample(&std10, &cfg(1)).map_err(|e| e.to_string())?;
    let ks1 = calibrated("10-D standard normal", &d, &std10.mean, &[1.0; 10])?;

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
    let q = a.qr().q();
    let eig = DVector::from_fn(5, |i, _| 100f64.powf(i as f64 / 4.0));
    let cov = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    let mean = DVector::from_fn(5, |i, _| i as f64 - 2.0);
    let target = Gaussian { precision: cov.clone().try_inverse().unwrap(), mean: mean.clone() };
    let d = sample(&target, &cfg(2)).map_err(|e| e.to_string())?;
    let var: Vec<f64> = (0..5).map(|i| cov[(i, i)]).collect();
    let ks2 = calibrated("5-D correlated (cond 100)", &d, &mean, &var)?;
    Ok(format!(
        "means/variances within 3 MC-SE at {} pooled draws; max KS {:.4} / {:.4}",
        d.n_pooled(),
        ks1,
        ks2
    ))
}

// ------------------------------------------------------------ criterion 4

fn gamma_law() -> Verdict {
    let mut parts = Vec::new();
    for n in [5u64, 50, 500] {
        let sigma2 = 2.3;
        let mut rng = ChaCha8Rng::seed_from_u64(40 + n);
        let v: Vec<f64> = (0..5000)
            .map(|_| (n - 1) as f64 * observe(1.0, sigma2, n, &mut rng, |_| {}).1 / sigma2)
            .collect();
        let r = v.len() as f64;
        let m = v.iter().sum::<f64>() / r;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (r - 1.0);
        let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / r;
        let df = (n - 1) as f64;
        let (se_m, se_v) = ((var / r).sqrt(), ((m4 - var * var) / r).sqrt());
        if (m - df).abs() >= 3.0 * se_m || (var - 2.0 * df).abs() >= 3.0 * se_v {
            return Err(format!("n={n}: mean {m:.3} (want {df}), var {var:.3} (want {})", 2.0 * df));
        }
        parts.push(format!("n={n}: {:+.2}/{:+.2} SE", (m - df) / se_m, (var - 2.0 * df) / se_v));
    }
    Ok(format!("mean/var z-scores {}", parts.join(", ")))
}

// ------------------------------------------------------- criteria 5 and 6

fn scaled_config(scenario: &str, seed: u64) -> RunConfig {
    let mut c = RunConfig::from_json(&format!(
        r#"{{"seed": {seed},
            "simulation": {{"scenario": "{scenario}", "reps": 20, "m": 40, "j": 10, "k": 4}},
            "sampler": {{"chains": 4, "warmup": 500, "samples": 1500}}}}"#
    ))
    .unwrap();
    c.validate().unwrap();
    c.output.dir = std::env::temp_dir();
    c
}

fn run_reps(cfg: &RunConfig, models: &[ModelKind]) -> Result<Vec<CompareRow>, String> {
    let mut rows = Vec::new();
    for rep in 0..cfg.simulation.reps {
        rows.extend(compare_rep(cfg, rep, models).map_err(|e| format!("{e:#}"))?);
    }
    Ok(rows)
}

fn medians(rows: &[CompareRow]) -> BTreeMap<String, (f64, f64)> {
    let mut by: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = by.entry(r.model.clone()).or_default();
        e.0.push(r.mape);
        e.1.push(r.interval_score);
    }
    by.into_iter()
        .map(|(k, (m, i))| (k, (stream_meta::eval::median(&m), stream_meta::eval::median(&i))))
        .collect()
}

fn table(med: &BTreeMap<String, (f64, f64)>) -> String {
    med.iter().map(|(k, (m, i))| format!("{k} {m:.2}/{i:.2}")).collect::<Vec<_>>().join(", ")
}

fn scenario_i_ordering() -> Verdict {
    use ModelKind::*;
    let rows = run_reps(&scaled_config("i", 2025), &[Fe, Re, ReGp, ReMv, Stream])?;
    let med = medians(&rows);
    let s = med["STREAM"];
    let mut failures = Vec::new();
    for k in ["FE", "RE", "RE-GP"] {
        if !(s.0 < med[k].0) {
            failures.push(format!("MAPE not below {k}"));
        }
        if !(s.1 < med[k].1) {
            failures.push(format!("IS not below {k}"));
        }
    }
    if !(s.1 < med["RE-MV"].1) {
        failures.push("IS not below RE-MV".into());
    }
    let detail = format!("median MAPE/IS: {}", table(&med));
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join(", ")))
    }
}

fn scenario_iii_ordering() -> Verdict {
    use ModelKind::*;
    let rows = run_reps(&scaled_config("iii", 2026), &[Re, ReGp, Stream])?;
    let med = medians(&rows);
    let detail = format!("median MAPE/IS: {}", table(&med));
    let (s, re, gp) = (med["STREAM"].0, med["RE"].0, med["RE-GP"].0);
    match (s < re, gp > s) {
        (true, true) => Ok(detail),
        (a, b) => Err(format!(
            "{}{}; {detail}",
            if a { "" } else { "STREAM MAPE not below RE " },
            if b { "" } else { "RE-GP MAPE not above STREAM" }
        )),
    }
}

// ------------------------------------------------------------ criterion 7

fn convergence_parity() -> Verdict {
    let cfg = scaled_config("i", 2027);
    let sc = cfg.scenario_config(0).unwrap();
    let (d, _) = generate_dataset(&sc).map_err(|e| e.to_string())?;
    let (train, _) = split_by_time(&d, 0.8).map_err(|e| e.to_string())?;
    let train = standalone(&train).map_err(|e| e.to_string())?;
    let spec = ModelSpec::new(ModelKind::Stream);
    let mut maxes = Vec::new();
    for run in 0..10u64 {
        let sampler = SamplerConfig { seed: derive_seed(sc.seed, &[tag("parity"), run]), ..cfg.sampler_config().unwrap() };
        let draws = fit_model(&train, &spec, &sampler).map_err(|e| format!("{e:#}"))?;
        let r = convergence_report(&draws, &DiagnoseOptions::default()).map_err(|e| e.to_string())?;
        maxes.push(r.max_r_hat);
    }
    let ok = maxes.iter().filter(|&&r| r <= 1.1).count();
    let detail = format!(
        "{ok}/10 runs with max R-hat <= 1.1 (max R-hat per run: {})",
        maxes.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" ")
    );
    if ok >= 8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------ criterion 8

fn metric_exactness() -> Verdict {
    let checks = [
        ("MAPE", mape(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 75.0),
        ("scaled MSE", scaled_mse(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.625),
        ("IS", interval_score(&[1.5], &[0.0], &[1.0], 0.05).unwrap(), 21.0),
        ("R-hat", gelman_rubin(&[vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0]]).unwrap(), 0.75f64.sqrt()),
    ];
    for (name, got, want) in checks {
        if (got - want).abs() > 1e-12 {
            return Err(format!("{name}: {got} vs {want}"));
        }
    }
    Ok("MAPE 75, scaled MSE 0.625, IS 21, R-hat sqrt(0.75) to 1e-12".into())
}

// ------------------------------------------------------------ criterion 9

fn collect_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn reproducibility() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 99,
            "simulation": {"scenario": "i", "reps": 1, "m": 40, "j": 10, "k": 4},
            "sampler": {"chains": 2, "warmup": 200, "samples": 300}}"#,
    )
    .unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_stream-meta"))
            .args(["pipeline", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .env("STREAM_META_THREADS", "2")
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("pipeline run {run} failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        let mut files = collect_files(&out);
        // manifests carry wall-clock times and the output path
        files.retain(|k, _| !k.rsplit('/').next().unwrap_or(k).starts_with("manifest_"));
        trees.push(files);
    }
    let (a, b) = (&trees[0], &trees[1]);
    if a.keys().ne(b.keys()) {
        return Err("the two runs produced different file sets".into());
    }
    for (k, v) in a {
        if b[k] != *v {
            return Err(format!("{k} differs between runs"));
        }
    }
    let needed = ["draws/chain_1.csv", "predictions.csv", "scores.json"];
    for n in needed {
        if !a.keys().any(|k| k.ends_with(n)) {
            return Err(format!("no {n} produced"));
        }
    }
    Ok(format!("{} files byte-identical across two runs (draws, predictions, scores included)", a.len()))
}

fn main() {
    // `cargo test -- <filter>` passes a filter; run the criteria whose
    // number or name matches it.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("1 gradient correctness", gradients),
        ("2 GP conditioning oracle", gp_oracle),
        ("3 sampler calibration", sampler_calibration),
        ("4 likelihood-model consistency", gamma_law),
        ("5 scenario i ordering", scenario_i_ordering),
        ("6 scenario iii ordering", scenario_iii_ordering),
        ("7 convergence parity", convergence_parity),
        ("8 metric exactness", metric_exactness),
        ("9 end-to-end reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let verdict = run();
        let secs = t0.elapsed().as_secs_f64();
        match verdict {
            Ok(msg) => println!("[criterion {name}] PASS ({secs:.1}s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("[criterion {name}] FAIL ({secs:.1}s): {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
