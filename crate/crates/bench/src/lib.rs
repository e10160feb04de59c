//! Shared fixtures for the benchmarks. Timings do not depend on how well a
//! network is trained, so untrained networks stand in for trained ones.

use diffan_core::{sample_dataset, sample_er, AnmSpec, Architecture, Dag, Dataset, NoiseSchedule, ScoreNet};
use ndarray::{s, Array2};

/// ER1 graph and a GP-mechanism dataset drawn from it.
pub fn problem(d: usize, n: usize, seed: u64) -> (Dag, Dataset) {
    let g = sample_er(d, 1.0, seed).expect("valid ER parameters");
    let data = sample_dataset(&AnmSpec::new(g.clone(), seed), n, seed).expect("valid spec");
    (g, data)
}

pub fn net(d: usize) -> ScoreNet {
    ScoreNet::new(Architecture::for_dim(d), NoiseSchedule::default(), 0).expect("valid architecture")
}

/// First `k` standardized rows of `data`.
pub fn batch(data: &Dataset, k: usize) -> Array2<f64> {
    let z = diffan_core::Standardizer::fit(data.x()).apply(data.x());
    z.slice(s![..k, ..]).to_owned()
}
