#![allow(dead_code)]

use fedunlearn::harness::ScenarioConfig;

/// A few seconds per run: three clients, short corpora, three rounds.
pub fn small_config() -> ScenarioConfig {
    ScenarioConfig {
        n_clients: 3,
        samples_per_client: 40,
        validation_samples: 60,
        rounds: 3,
        seeds: vec![0],
        baseline: false,
        ..ScenarioConfig::default()
    }
}
