//! Simulated clock and the latency profile that drives it.

use serde::{Deserialize, Serialize};

/// Virtual time in seconds. Only ever moves forward.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimClock {
    now_s: f64,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(now_s: f64) -> Self {
        SimClock { now_s: now_s.max(0.0) }
    }

    pub fn now(&self) -> f64 {
        self.now_s
    }

    /// Advances by `dt_s` (negative or NaN deltas are ignored) and returns the new time.
    pub fn advance(&mut self, dt_s: f64) -> f64 {
        if dt_s > 0.0 {
            self.now_s += dt_s;
        }
        self.now_s
    }
}

/// Per-event costs of the ledger-backed deployment, in simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    /// One-off network setup.
    pub setup_s: f64,
    /// Endorsement round after setup.
    pub consensus_s: f64,
    /// Per ledger transaction.
    pub tx_s: f64,
    /// Per training epoch.
    pub epoch_s: f64,
}

impl LatencyProfile {
    /// Costs measured on the reference Fabric deployment.
    pub const PAPER: LatencyProfile = LatencyProfile {
        setup_s: 42.0,
        consensus_s: 4.0,
        tx_s: 3.0,
        epoch_s: 30.0,
    };

    pub const ZERO: LatencyProfile = LatencyProfile {
        setup_s: 0.0,
        consensus_s: 0.0,
        tx_s: 0.0,
        epoch_s: 0.0,
    };

    pub fn by_name(name: &str) -> Option<LatencyProfile> {
        match name {
            "paper" => Some(Self::PAPER),
            "zero" => Some(Self::ZERO),
            _ => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.setup_s, self.consensus_s, self.tx_s, self.epoch_s]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
    }
}

impl Default for LatencyProfile {
    fn default() -> Self {
        Self::PAPER
    }
}
