//! Ledger-audited federated LoRA training and unlearning, simulated end to end.
//!
//! The crate is organised bottom-up:
//!
//! - [`ledger`]: append-only, SHA-256 hash-chained transaction log.
//! - [`identity`]: Ed25519 key pairs, JWT-style tokens and the user pool.
//! - [`chaincode`]: the smart-contract state machine that mediates every
//!   model upload, client update, aggregation and unlearning commit.
//! - [`tinylm`]: a byte-level single-block transformer classifier with LoRA
//!   adapters and hand-written backpropagation.
//! - [`fedcore`]: local client training, weighted aggregation and the
//!   per-round protocol loop.
//! - [`unlearner`]: gradient-ascent forgetting through a fresh adapter,
//!   verification and the retrain-from-scratch baseline.
//! - [`harness`]: corpora, scenario runs, sweeps, the time-cost model and
//!   report emission.
//!
//! Everything runs on a simulated clock ([`clock`]) and is deterministic
//! given its seeds. Data-parallel loops go through [`par`], which uses rayon
//! when the `parallel` feature is on.

pub mod chaincode;
pub mod clock;
pub mod error;
pub mod fedcore;
pub mod harness;
pub mod identity;
pub mod ledger;
pub mod par;
pub mod seed;
pub mod tinylm;
pub mod unlearner;

pub use error::{Error, Result};
