use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::canonical::{DecodeError, Decoder, Encoder, Hash32};

/// Transaction identifier: digest of the canonical transaction header.
pub type TxId = Hash32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TxKind {
    Register,
    ModelUpload,
    ParameterSubmission,
    AggregatedModel,
    UnlearnResult,
    VerificationRecord,
}

impl TxKind {
    pub const ALL: [TxKind; 6] = [
        TxKind::Register,
        TxKind::ModelUpload,
        TxKind::ParameterSubmission,
        TxKind::AggregatedModel,
        TxKind::UnlearnResult,
        TxKind::VerificationRecord,
    ];

    /// Ordinal used in the canonical encoding.
    pub fn code(self) -> u64 {
        self as u64
    }

    pub fn from_code(code: u64) -> Option<TxKind> {
        TxKind::ALL.get(usize::try_from(code).ok()?).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TxKind::Register => "Register",
            TxKind::ModelUpload => "ModelUpload",
            TxKind::ParameterSubmission => "ParameterSubmission",
            TxKind::AggregatedModel => "AggregatedModel",
            TxKind::UnlearnResult => "UnlearnResult",
            TxKind::VerificationRecord => "VerificationRecord",
        }
    }
}

impl fmt::Display for TxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TxKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TxKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown transaction kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transaction {
    pub t_id: TxId,
    pub kind: TxKind,
    pub submitter: String,
    pub payload_digest: Hash32,
    pub payload: Vec<u8>,
    pub sim_time_s: f64,
}

impl Transaction {
    pub fn new(kind: TxKind, submitter: &str, payload: Vec<u8>, sim_time_s: f64) -> Self {
        let payload_digest = Hash32::of(&payload);
        let t_id = compute_t_id(kind, submitter, &payload_digest, sim_time_s);
        Transaction {
            t_id,
            kind,
            submitter: submitter.to_owned(),
            payload_digest,
            payload,
            sim_time_s,
        }
    }

    /// Both transaction invariants: payload digest and t_id recompute.
    pub fn is_consistent(&self) -> bool {
        Hash32::of(&self.payload) == self.payload_digest
            && compute_t_id(self.kind, &self.submitter, &self.payload_digest, self.sim_time_s)
                == self.t_id
    }

    fn encode_into(&self, e: &mut Encoder) {
        e.bytes(self.t_id.as_bytes())
            .u64(self.kind.code())
            .str(&self.submitter)
            .bytes(self.payload_digest.as_bytes())
            .bytes(&self.payload)
            .f64(self.sim_time_s);
    }

    fn decode_from(d: &mut Decoder<'_>) -> Result<Transaction, DecodeError> {
        let t_id = d.hash()?;
        let kind_code = d.u64()?;
        let kind = TxKind::from_code(kind_code).ok_or(DecodeError(0))?;
        Ok(Transaction {
            t_id,
            kind,
            submitter: d.string()?,
            payload_digest: d.hash()?,
            payload: d.bytes()?.to_vec(),
            sim_time_s: d.f64()?,
        })
    }
}

/// Digest of canonical `(kind, submitter, payload_digest, sim_time_s)`.
pub fn compute_t_id(kind: TxKind, submitter: &str, payload_digest: &Hash32, sim_time_s: f64) -> TxId {
    let mut e = Encoder::new();
    e.u64(kind.code())
        .str(submitter)
        .bytes(payload_digest.as_bytes())
        .f64(sim_time_s);
    e.digest()
}

/// Digest of canonical `(index, prev_hash, [t_id...])`, the list count-prefixed.
pub fn compute_block_hash<'a>(
    index: u64,
    prev_hash: &Hash32,
    t_ids: impl ExactSizeIterator<Item = &'a TxId>,
) -> Hash32 {
    let mut e = Encoder::new();
    e.u64(index).bytes(prev_hash.as_bytes()).u64(t_ids.len() as u64);
    for t in t_ids {
        e.bytes(t.as_bytes());
    }
    e.digest()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Hash32,
    pub transactions: Vec<Transaction>,
    pub block_hash: Hash32,
}

impl Block {
    pub(crate) fn seal(index: u64, prev_hash: Hash32, transactions: Vec<Transaction>) -> Block {
        let block_hash = compute_block_hash(index, &prev_hash, transactions.iter().map(|t| &t.t_id));
        Block {
            index,
            prev_hash,
            transactions,
            block_hash,
        }
    }

    pub fn recompute_hash(&self) -> Hash32 {
        compute_block_hash(self.index, &self.prev_hash, self.transactions.iter().map(|t| &t.t_id))
    }

    /// Full byte image of the block: header, stored hash and every transaction field.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u64(self.index)
            .bytes(self.prev_hash.as_bytes())
            .bytes(self.block_hash.as_bytes())
            .u64(self.transactions.len() as u64);
        for tx in &self.transactions {
            tx.encode_into(&mut e);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Block, DecodeError> {
        let mut d = Decoder::new(bytes);
        let index = d.u64()?;
        let prev_hash = d.hash()?;
        let block_hash = d.hash()?;
        let n = d.u64()?;
        let mut transactions = Vec::new();
        for _ in 0..n {
            transactions.push(Transaction::decode_from(&mut d)?);
        }
        d.finish()?;
        Ok(Block {
            index,
            prev_hash,
            transactions,
            block_hash,
        })
    }
}
