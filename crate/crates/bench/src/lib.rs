//! Shared fixtures for the benchmarks.

use stream_meta::{generate_dataset, scenario_params, Dataset, Scenario, ScenarioConfig};

/// A scenario-i dataset of `m` experiments, fixed seed.
pub fn fixture(m: usize) -> Dataset {
    let cfg = ScenarioConfig { m, seed: 11, ..scenario_params(Scenario::I) };
    generate_dataset(&cfg).expect("valid scenario").0
}
