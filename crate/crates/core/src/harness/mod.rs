//! Scenario harness: corpora, full-protocol runs, sweeps, the time-cost
//! model and report files.

pub mod corpus;
pub mod report;
pub mod scenario;
pub mod sweep;
pub mod timecost;

use crate::chaincode::ChaincodeError;
use crate::fedcore::FedError;
use crate::ledger::LedgerError;
use crate::unlearner::UnlearnError;

pub use corpus::{generate_corpus, generate_flipped_corpus, load_csv_corpus, rule_oracle, CorpusError, Sample};
pub use report::{emit_report, BoxStats};
pub use scenario::{run_scenario, CommitStatus, CorpusSource, LoraGrid, ScenarioConfig, ScenarioOutcome};
pub use sweep::{run_sweep, SweepGrid, SweepRow};
pub use timecost::{time_cost_model, time_cost_table, TimeCost};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    IoError(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Unlearn(#[from] UnlearnError),
    #[error(transparent)]
    Chaincode(#[from] ChaincodeError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::IoError(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::IoError(e.to_string())
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::IoError(e.to_string())
    }
}
