//! Analytic gradients against central finite differences.

mod common;

use common::{close, fd_gradient, toy_dataset, uniform_point};
use stream_meta::{Model, ModelKind, ModelSpec};

#[test]
fn analytic_gradient_matches_finite_differences_for_every_kind() {
    let mut worst = 0.0f64;
    for kind in ModelKind::ALL {
        let spec = ModelSpec::new(kind);
        for ds in 0..5 {
            let d = toy_dataset(100 + ds, 6, 3, 2, 4, 1);
            let model = Model::new(&d, &spec).unwrap();
            let dim = model.layout().dim();
            for pt in 0..10 {
                let u = uniform_point(1000 * ds + pt, dim, 1.0);
                let g = model.grad_log_posterior(&u).unwrap();
                let f = fd_gradient(|x| model.log_posterior(x), &u, 1e-5);
                for i in 0..dim {
                    let err = (g[i] - f[i]).abs() / g[i].abs().max(f[i].abs()).max(1e-3);
                    worst = worst.max(err);
                    assert!(
                        close(g[i], f[i], 1e-5, 1e-8),
                        "{kind} dataset {ds} point {pt} coord {} ({}): analytic {} vs fd {}",
                        i,
                        model.layout().param_names()[i],
                        g[i],
                        f[i]
                    );
                }
            }
        }
    }
    eprintln!("worst relative gradient error {worst:e}");
}

#[test]
fn intercept_gradient_is_sum_of_standardized_residuals() {
    let d = toy_dataset(7, 6, 3, 2, 4, 1);
    let mut spec = ModelSpec::new(ModelKind::Fe);
    // flatten the intercept prior so only the likelihood contributes
    spec.priors.s_alpha_theta = 1e150;
    let model = Model::new(&d, &spec).unwrap();
    let u = uniform_point(3, model.layout().dim(), 1.0);
    let c = model.constrain(&u).unwrap();
    let theta = model.fitted_theta(&c).unwrap();
    let expected: f64 = d.records().iter().zip(&theta).map(|(r, t)| (r.y - t) / r.s2).sum();
    let g = model.grad_log_posterior(&u).unwrap();
    let off = model.layout().get("alpha_theta").unwrap().offset;
    assert!((g[off] - expected).abs() < 1e-10 * expected.abs().max(1.0));
}

#[test]
fn location_gradient_vanishes_at_prior_centre_without_data() {
    let full = toy_dataset(9, 6, 3, 2, 4, 1);
    let empty = stream_meta::Dataset::with_levels(Vec::new(), full.levels().clone()).unwrap();
    for kind in ModelKind::ALL {
        let spec = ModelSpec::new(kind);
        let model = Model::new(&empty, &spec).unwrap();
        let layout = model.layout();
        let mut u = uniform_point(5, layout.dim(), 1.0);
        let location = ["alpha_theta", "theta_a", "theta_b", "theta_c", "beta_theta", "alpha_sigma", "delta_a", "delta_b", "beta_sigma"];
        for b in layout.blocks() {
            if location.contains(&b.name.as_str()) {
                u[b.offset..b.offset + b.len].fill(0.0);
            }
        }
        let g = model.grad_log_posterior(&u).unwrap();
        for b in layout.blocks() {
            if location.contains(&b.name.as_str()) {
                assert!(g[b.offset..b.offset + b.len].iter().all(|&v| v == 0.0), "{kind} {}", b.name);
            }
        }
    }
}
