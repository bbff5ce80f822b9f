//! Seed derivation.
//!
//! Every stream of randomness in the simulator is keyed by a domain label and
//! a tuple of counters, so results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// SHA-256 of `label || parts (u64 LE)`, truncated to the first 8 bytes.
pub fn derive(label: &str, parts: &[u64]) -> u64 {
    let bytes = derive_bytes(label, parts);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

/// Full 32-byte form of [`derive`].
pub fn derive_bytes(label: &str, parts: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    h.finalize().into()
}

pub fn rng(label: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_bytes(label, parts))
}
