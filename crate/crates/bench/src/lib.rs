//! Shared fixtures for the benchmarks.

use cknn_core::simlab::build_scenario;
use cknn_core::{FhInputs, PopulationFrame, PopulationSpec};

/// Analyst's view of a reference-layout population of `n` units with a
/// sample of `sample` units.
pub fn scenario_frame(n: usize, sample: usize, seed: u64) -> PopulationFrame {
    build_scenario(&PopulationSpec::scaled(n), sample, seed)
        .expect("reference scenario")
        .observed()
}

/// Area-level data drawn from the FH model with two covariates.
pub fn fh_inputs(m: usize, seed: u64) -> FhInputs {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut direct = Vec::with_capacity(m);
    let mut variance = Vec::with_capacity(m);
    let mut covariates = Vec::with_capacity(m);
    for _ in 0..m {
        let x: f64 = rng.random_range(0.0..10.0);
        let psi: f64 = rng.random_range(1.0..9.0);
        let noise: f64 = rng.random_range(-1.0..1.0) * 3.0 + rng.random_range(-1.0..1.0) * psi.sqrt();
        direct.push(5.0 + 2.0 * x + noise);
        variance.push(psi);
        covariates.push(vec![1.0, x]);
    }
    FhInputs::new(direct, variance, covariates, vec!["intercept".into(), "x".into()]).expect("valid inputs")
}
