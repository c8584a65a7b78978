//! Fixtures shared by the benchmarks.

use flexor_core::simulation::{generate_replicate, ScenarioConfig, Similarity, SimulationPool};
use flexor_core::Dataset;

/// One low-similarity replicate with `n` subjects.
pub fn replicate_dataset(n: usize) -> Dataset {
    let cfg = ScenarioConfig {
        n_subjects: n,
        ..ScenarioConfig::new(Similarity::Low)
    };
    let pool = SimulationPool::synthetic(&cfg).expect("synthetic pool");
    generate_replicate(&cfg, &pool, 0).expect("replicate").dataset
}
