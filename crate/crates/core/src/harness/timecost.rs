//! Additive time-cost model of plain vs. ledger-backed federated training.

use serde::Serialize;

use crate::clock::{LatencyProfile, SimClock};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeCost {
    pub iterations: u64,
    pub txs_per_iteration: u64,
    pub normal_s: f64,
    pub enhanced_s: f64,
}

/// `normal = iterations * epoch`;
/// `enhanced = setup + consensus + iterations * (epoch + txs * tx)`.
///
/// Both totals are produced by advancing simulated clocks.
pub fn time_cost_model(profile: &LatencyProfile, iterations: u64, txs_per_iteration: u64) -> TimeCost {
    let mut normal = SimClock::new();
    let mut enhanced = SimClock::new();
    enhanced.advance(profile.setup_s);
    enhanced.advance(profile.consensus_s);
    for _ in 0..iterations {
        normal.advance(profile.epoch_s);
        enhanced.advance(profile.epoch_s);
        for _ in 0..txs_per_iteration {
            enhanced.advance(profile.tx_s);
        }
    }
    TimeCost {
        iterations,
        txs_per_iteration,
        normal_s: normal.now(),
        enhanced_s: enhanced.now(),
    }
}

/// Rows for iteration counts 1, 10, 100 and 1000 (t = 0, 9, 99, 999).
pub fn time_cost_table(profile: &LatencyProfile, txs_per_iteration: u64) -> Vec<TimeCost> {
    [1, 10, 100, 1000]
        .iter()
        .map(|&n| time_cost_model(profile, n, txs_per_iteration))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_profile() {
        let t = time_cost_model(&LatencyProfile::PAPER, 1, 1);
        assert_eq!((t.normal_s, t.enhanced_s), (30.0, 79.0));
        assert_eq!(time_cost_model(&LatencyProfile::PAPER, 10, 1).enhanced_s, 376.0);
    }

    #[test]
    fn zero_profile_collapses() {
        for n in [1, 7, 100] {
            let t = time_cost_model(&LatencyProfile::ZERO, n, 5);
            assert_eq!(t.normal_s, t.enhanced_s);
        }
        let no_chain = LatencyProfile {
            setup_s: 0.0,
            consensus_s: 0.0,
            tx_s: 0.0,
            ..LatencyProfile::PAPER
        };
        let t = time_cost_model(&no_chain, 10, 3);
        assert_eq!(t.normal_s, t.enhanced_s);
    }
}
