//! Shared fixtures and independent reference computations for the
//! integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stream_meta::{Dataset, ExperimentRecord};

/// Toy dataset with every one of `j` and `k` group labels and `l` distinct
/// integer times present, `q` covariates.
pub fn toy_dataset(seed: u64, m: usize, j: usize, k: usize, l: usize, q: usize) -> Dataset {
    assert!(m >= j.max(k).max(l));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<u32> = (1..=24).collect();
    pool.shuffle(&mut rng);
    let times: Vec<f64> = pool[..l].iter().map(|&t| t as f64).collect();
    let mut a: Vec<usize> = (0..m).map(|i| i % j).collect();
    let mut b: Vec<usize> = (0..m).map(|i| i % k).collect();
    let mut c: Vec<usize> = (0..m).map(|i| i % l).collect();
    a.shuffle(&mut rng);
    b.shuffle(&mut rng);
    c.shuffle(&mut rng);
    let records = (0..m)
        .map(|i| ExperimentRecord {
            id: format!("e{i}"),
            y: rng.random_range(-1.0..2.0),
            s2: rng.random_range(0.3..2.0),
            n: rng.random_range(3..30),
            t: times[c[i]],
            group_a: format!("a{}", a[i]),
            group_b: format!("b{}", b[i]),
            x: (0..q).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    Dataset::new(records).unwrap()
}

pub fn uniform_point(seed: u64, dim: usize, half_width: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.random_range(-half_width..half_width)).collect()
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − f| ≤ max(rel · max(|a|, |f|), abs)`.
pub fn close(a: f64, f: f64, rel: f64, abs: f64) -> bool {
    (a - f).abs() <= (rel * a.abs().max(f.abs())).max(abs)
}

pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Effective sample size from the initial positive sequence of
/// autocorrelations, summed over chains.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    chains
        .iter()
        .map(|c| {
            let n = c.len();
            let (m, v) = mean_var(c);
            if v == 0.0 {
                return n as f64;
            }
            let rho = |lag: usize| {
                (0..n - lag).map(|i| (c[i] - m) * (c[i + lag] - m)).sum::<f64>() / ((n - 1) as f64 * v)
            };
            let mut tau = 1.0;
            let mut lag = 1;
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

/// Kolmogorov–Smirnov distance between a sample and a continuous CDF.
pub fn ks_distance(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
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
