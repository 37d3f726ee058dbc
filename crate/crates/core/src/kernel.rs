//! Periodic covariance kernel and exact Gaussian conditioning for the
//! time-effect process.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative jitter first tried on a covariance diagonal (times `sigma_p2`).
pub const BASE_JITTER: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma_p2: f64,
    pub l_p: f64,
    pub p_e: f64,
}

impl KernelParams {
    pub fn new(sigma_p2: f64, l_p: f64, p_e: f64) -> Result<Self> {
        for (name, v) in [("sigma_p2", sigma_p2), ("l_p", l_p), ("p_e", p_e)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(KernelParams { sigma_p2, l_p, p_e })
    }

    /// Correlation between two times, i.e. the kernel with unit variance.
    #[inline]
    pub fn correlation(&self, t: f64, t2: f64) -> f64 {
        let s = (std::f64::consts::PI * (t - t2).abs() / self.p_e).sin();
        (-2.0 * s * s / (self.l_p * self.l_p)).exp()
    }
}

/// `σ_p² exp(−2 sin²(π|t−t′|/p_e) / l_p²)`.
#[inline]
pub fn kernel_eval(t: f64, t2: f64, kp: &KernelParams) -> f64 {
    kp.sigma_p2 * kp.correlation(t, t2)
}

/// Kernel matrix over `times` with `jitter` added to the diagonal.
pub fn build_cov(times: &[f64], kp: &KernelParams, jitter: f64) -> DMatrix<f64> {
    let n = times.len();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        c[(i, i)] = kp.sigma_p2 + jitter;
        for j in 0..i {
            let v = kernel_eval(times[i], times[j], kp);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

fn cross_cov(a: &[f64], b: &[f64], kp: &KernelParams) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| kernel_eval(a[i], b[j], kp))
}

/// Cholesky factor of `m + jitter·I`, escalating the jitter tenfold from
/// `BASE_JITTER·scale` up to `MAX_JITTER·scale` until the factorization
/// succeeds. Returns the factor and the jitter that was used.
pub fn cholesky_jittered(m: &DMatrix<f64>, scale: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut rel = BASE_JITTER;
    loop {
        let jitter = rel * scale;
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(a) {
            return Ok((ch, jitter));
        }
        if rel >= MAX_JITTER * 0.999 {
            return Err(Error::Factorization { jitter });
        }
        rel *= 10.0;
    }
}

/// Conditional distribution of process values at new times.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianConditional {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianConditional {
    /// Draws one joint sample. The covariance is factored with the same
    /// jitter schedule as the kernel matrix, scaled by `scale`.
    pub fn sample<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Result<DVector<f64>> {
        let n = self.mean.len();
        if n == 0 {
            return Ok(DVector::zeros(0));
        }
        let (ch, _) = cholesky_jittered(&self.cov, scale)?;
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(&self.mean + ch.l() * z)
    }
}

/// Exact Gaussian conditioning of a zero-mean process observed without noise
/// at `train_times`. The training covariance is factored (with jitter),
/// never inverted.
pub fn gp_condition(
    train_times: &[f64],
    train_values: &[f64],
    test_times: &[f64],
    kp: &KernelParams,
) -> Result<GaussianConditional> {
    if train_times.len() != train_values.len() {
        return Err(Error::Contract(format!(
            "{} training times but {} values",
            train_times.len(),
            train_values.len()
        )));
    }
    let prior = build_cov(test_times, kp, 0.0);
    if train_times.is_empty() {
        return Ok(GaussianConditional {
            mean: DVector::zeros(test_times.len()),
            cov: prior,
        });
    }
    let k_ll = build_cov(train_times, kp, 0.0);
    let (ch, _) = cholesky_jittered(&k_ll, kp.sigma_p2)?;
    let k_lt = cross_cov(train_times, test_times, kp);
    let alpha = ch.solve(&DVector::from_column_slice(train_values));
    let mean = k_lt.transpose() * alpha;
    let v = ch
        .l_dirty()
        .solve_lower_triangular(&k_lt)
        .ok_or(Error::Factorization { jitter: f64::NAN })?;
    let mut cov = prior - v.transpose() * v;
    let n = cov.nrows();
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = s;
            cov[(j, i)] = s;
        }
    }
    Ok(GaussianConditional { mean, cov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kp(s: f64, l: f64) -> KernelParams {
        KernelParams::new(s, l, 12.0).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let k = kp(2.3, 0.7);
        assert_eq!(kernel_eval(4.0, 4.0, &k), 2.3);
        assert!((kernel_eval(1.0, 13.0, &kp(3.0, 0.7)) - 3.0).abs() < 1e-12);
        let half = kernel_eval(0.0, 6.0, &kp(1.0, 2f64.sqrt()));
        assert!((half - 0.36787944117144233).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_params() {
        assert!(KernelParams::new(0.0, 1.0, 12.0).is_err());
        assert!(KernelParams::new(1.0, -1.0, 12.0).is_err());
    }

    #[test]
    fn cov_single_and_singular() {
        let k = kp(2.0, 1.0);
        let c = build_cov(&[3.0], &k, 0.5);
        assert_eq!(c[(0, 0)], 2.5);
        let c = build_cov(&[1.0, 13.0], &k, 0.0);
        assert!((c[(0, 1)] - 2.0).abs() < 1e-12);
        assert!(c.determinant().abs() < 1e-10);
        // jitter escalation rescues the singular matrix
        let (_, j) = cholesky_jittered(&c, k.sigma_p2).unwrap();
        assert!(j <= MAX_JITTER * k.sigma_p2);
    }

    #[test]
    fn cov_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let times: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..30.0)).collect();
            let k = kp(rng.random_range(0.1..3.0), rng.random_range(0.3..3.0));
            let c = build_cov(&times, &k, 0.0);
            let eig = c.symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&e| e > -1e-10), "{:?}", eig.eigenvalues);
        }
    }

    #[test]
    fn conditioning_interpolates() {
        let k = kp(1.5, 1.0);
        let times = [1.0, 2.5, 4.0, 7.0];
        let vals = [0.3, -1.0, 0.8, 0.1];
        let c = gp_condition(&times, &vals, &times, &k).unwrap();
        for i in 0..4 {
            assert!((c.mean[i] - vals[i]).abs() < 1e-6);
            for j in 0..4 {
                assert!(c.cov[(i, j)].abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conditioning_without_data_is_prior() {
        let k = kp(1.5, 1.0);
        let test = [1.0, 5.0];
        let c = gp_condition(&[], &[], &test, &k).unwrap();
        assert_eq!(c.mean, DVector::zeros(2));
        assert_eq!(c.cov, build_cov(&test, &k, 0.0));
    }

    #[test]
    fn conditional_variance_never_inflates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let l = rng.random_range(1..6);
            let train: Vec<f64> = (0..l).map(|_| rng.random_range(0.0..24.0)).collect();
            let vals: Vec<f64> = (0..l).map(|_| rng.random_range(-2.0..2.0)).collect();
            let test: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..30.0)).collect();
            let k = kp(rng.random_range(0.2..2.0), rng.random_range(0.3..2.0));
            let c = gp_condition(&train, &vals, &test, &k).unwrap();
            for i in 0..3 {
                assert!(c.cov[(i, i)] <= k.sigma_p2 * (1.0 + BASE_JITTER) + 1e-8);
            }
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn symmetric_periodic_bounded(t in -50f64..50.0, t2 in -50f64..50.0, k in -3i32..4,
                                      s in 0.1f64..5.0, l in 0.2f64..4.0) {
            let kp = KernelParams::new(s, l, 12.0).unwrap();
            let v = kernel_eval(t, t2, &kp);
            prop_assert_eq!(v, kernel_eval(t2, t, &kp));
            let shifted = kernel_eval(t + k as f64 * 12.0, t2, &kp);
            prop_assert!((shifted - v).abs() < 1e-12);
            prop_assert!(v > 0.0 && v <= s);
        }
    }
}
