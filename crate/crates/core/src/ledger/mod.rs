//! Append-only, hash-chained transaction ledger.
//!
//! Transactions are submitted to a pending pool and become final once
//! [`ChainState::seal_block`] batches them into a block. Every digest is
//! SHA-256 over the canonical encoding in [`canonical`].

mod block;
pub mod canonical;
pub mod export;

use std::collections::HashMap;

pub use block::{compute_block_hash, compute_t_id, Block, Transaction, TxId, TxKind};
pub use canonical::Hash32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LedgerError {
    #[error("transaction time {got} precedes last appended time {last}")]
    NonMonotonicTime { last: f64, got: f64 },
    #[error("transaction payload is empty")]
    EmptyPayload,
    #[error("transaction {0} already exists")]
    DuplicateTransaction(TxId),
    #[error("no pending transactions to seal")]
    NothingPending,
    #[error("unknown transaction {0}")]
    UnknownTransaction(TxId),
    #[error("malformed ledger data: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainVerdict {
    Valid,
    /// Lowest block index that violates a block or transaction invariant.
    Invalid(u64),
}

impl ChainVerdict {
    pub fn is_valid(self) -> bool {
        self == ChainVerdict::Valid
    }
}

#[derive(Debug, Clone, Default)]
pub struct ChainState {
    blocks: Vec<Block>,
    pending: Vec<Transaction>,
    tx_index: HashMap<TxId, (usize, usize)>,
    last_time: Option<f64>,
}

impl ChainState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a chain from blocks obtained elsewhere (an export, a peer).
    ///
    /// No invariant is checked here; call [`ChainState::verify_chain`].
    pub fn from_blocks(blocks: Vec<Block>) -> Self {
        let mut tx_index = HashMap::new();
        let mut last_time = None;
        for (bi, b) in blocks.iter().enumerate() {
            for (ti, tx) in b.transactions.iter().enumerate() {
                tx_index.entry(tx.t_id).or_insert((bi, ti));
                last_time = Some(tx.sim_time_s);
            }
        }
        ChainState {
            blocks,
            pending: Vec::new(),
            tx_index,
            last_time,
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn pending(&self) -> &[Transaction] {
        &self.pending
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Time of the most recently appended transaction, pending or sealed.
    pub fn last_time(&self) -> Option<f64> {
        self.last_time
    }

    pub fn head_hash(&self) -> Hash32 {
        self.blocks.last().map_or(Hash32::ZERO, |b| b.block_hash)
    }

    /// Sealed transactions in chain order.
    pub fn transactions(&self) -> impl Iterator<Item = &Transaction> {
        self.blocks.iter().flat_map(|b| b.transactions.iter())
    }

    pub fn count_kind(&self, kind: TxKind) -> usize {
        self.transactions().filter(|t| t.kind == kind).count()
    }

    pub fn submit_transaction(
        &mut self,
        kind: TxKind,
        submitter: &str,
        payload: Vec<u8>,
        sim_time_s: f64,
    ) -> Result<TxId, LedgerError> {
        if payload.is_empty() {
            return Err(LedgerError::EmptyPayload);
        }
        if let Some(last) = self.last_time {
            // `!(>=)` also rejects NaN.
            if !(sim_time_s >= last) {
                return Err(LedgerError::NonMonotonicTime { last, got: sim_time_s });
            }
        } else if !(sim_time_s >= 0.0) {
            return Err(LedgerError::NonMonotonicTime { last: 0.0, got: sim_time_s });
        }
        let tx = Transaction::new(kind, submitter, payload, sim_time_s);
        if self.tx_index.contains_key(&tx.t_id) || self.pending.iter().any(|p| p.t_id == tx.t_id) {
            return Err(LedgerError::DuplicateTransaction(tx.t_id));
        }
        let id = tx.t_id;
        self.last_time = Some(sim_time_s);
        self.pending.push(tx);
        Ok(id)
    }

    pub fn seal_block(&mut self) -> Result<&Block, LedgerError> {
        if self.pending.is_empty() {
            return Err(LedgerError::NothingPending);
        }
        let index = self.blocks.len();
        let txs = std::mem::take(&mut self.pending);
        for (ti, tx) in txs.iter().enumerate() {
            self.tx_index.insert(tx.t_id, (index, ti));
        }
        let block = Block::seal(index as u64, self.head_hash(), txs);
        self.blocks.push(block);
        Ok(self.blocks.last().expect("just pushed"))
    }

    pub fn verify_chain(&self) -> ChainVerdict {
        verify_blocks(&self.blocks)
    }

    pub fn get_transaction(&self, t_id: &TxId) -> Result<&Transaction, LedgerError> {
        let &(bi, ti) = self
            .tx_index
            .get(t_id)
            .ok_or(LedgerError::UnknownTransaction(*t_id))?;
        Ok(&self.blocks[bi].transactions[ti])
    }

    /// Digest over the full byte image of every sealed block.
    pub fn fingerprint(&self) -> Hash32 {
        let mut all = Vec::new();
        for b in &self.blocks {
            all.extend_from_slice(&b.to_bytes());
        }
        Hash32::of(&all)
    }
}

/// Checks every block and transaction invariant in chain order.
pub fn verify_blocks(blocks: &[Block]) -> ChainVerdict {
    let mut prev = Hash32::ZERO;
    for (i, b) in blocks.iter().enumerate() {
        let ok = b.index == i as u64
            && b.prev_hash == prev
            && b.transactions.iter().all(Transaction::is_consistent)
            && b.recompute_hash() == b.block_hash;
        if !ok {
            return ChainVerdict::Invalid(i as u64);
        }
        prev = b.block_hash;
    }
    ChainVerdict::Valid
}

/// Verifies blocks given as raw byte images; an undecodable image counts as
/// a violation at its index.
pub fn verify_encoded(images: &[Vec<u8>]) -> ChainVerdict {
    let mut blocks = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        match Block::from_bytes(img) {
            Ok(b) => blocks.push(b),
            Err(_) => {
                // Anything decoded before i still has to be checked first.
                return match verify_blocks(&blocks) {
                    ChainVerdict::Valid => ChainVerdict::Invalid(i as u64),
                    bad => bad,
                };
            }
        }
    }
    verify_blocks(&blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_with(n_blocks: usize) -> ChainState {
        let mut c = ChainState::new();
        let mut t = 0.0;
        for b in 0..n_blocks {
            for k in 0..2 {
                t += 1.0;
                c.submit_transaction(TxKind::ParameterSubmission, &format!("c{k}"), vec![b as u8, k], t)
                    .unwrap();
            }
            c.seal_block().unwrap();
        }
        c
    }

    #[test]
    fn empty_payload_rejected() {
        let mut c = ChainState::new();
        assert_eq!(
            c.submit_transaction(TxKind::Register, "c1", vec![], 0.0),
            Err(LedgerError::EmptyPayload)
        );
    }

    #[test]
    fn time_must_not_regress() {
        let mut c = ChainState::new();
        c.submit_transaction(TxKind::Register, "c1", vec![1], 5.0).unwrap();
        assert!(matches!(
            c.submit_transaction(TxKind::Register, "c2", vec![1], 4.0),
            Err(LedgerError::NonMonotonicTime { .. })
        ));
        c.submit_transaction(TxKind::Register, "c2", vec![1], 5.0).unwrap();
        assert!(c.submit_transaction(TxKind::Register, "c3", vec![1], f64::NAN).is_err());
    }

    #[test]
    fn duplicate_tuple_rejected() {
        let mut c = ChainState::new();
        c.submit_transaction(TxKind::Register, "c1", vec![1], 1.0).unwrap();
        assert!(matches!(
            c.submit_transaction(TxKind::Register, "c1", vec![1], 1.0),
            Err(LedgerError::DuplicateTransaction(_))
        ));
    }

    #[test]
    fn identical_submissions_on_fresh_chains_agree() {
        let mut a = ChainState::new();
        let mut b = ChainState::new();
        let ia = a.submit_transaction(TxKind::ModelUpload, "agent", vec![9; 10], 2.0).unwrap();
        let ib = b.submit_transaction(TxKind::ModelUpload, "agent", vec![9; 10], 2.0).unwrap();
        assert_eq!(ia, ib);
        let mut p = vec![9; 10];
        p[3] = 8;
        let ic = ChainState::new()
            .submit_transaction(TxKind::ModelUpload, "agent", p, 2.0)
            .unwrap();
        assert_ne!(ia, ic);
    }

    #[test]
    fn seal_requires_pending() {
        let mut c = ChainState::new();
        assert_eq!(c.seal_block().unwrap_err(), LedgerError::NothingPending);
    }

    #[test]
    fn genesis_and_linkage() {
        let mut c = ChainState::new();
        c.submit_transaction(TxKind::Register, "c1", vec![1], 0.0).unwrap();
        let g = c.seal_block().unwrap().clone();
        assert_eq!(g.index, 0);
        assert_eq!(g.prev_hash, Hash32::ZERO);
        let ids: Vec<_> = (0..3)
            .map(|i| c.submit_transaction(TxKind::Register, &format!("d{i}"), vec![i], 1.0).unwrap())
            .collect();
        let b1 = c.seal_block().unwrap().clone();
        assert_eq!(b1.prev_hash, g.block_hash);
        assert_eq!(b1.transactions.iter().map(|t| t.t_id).collect::<Vec<_>>(), ids);
        assert!(c.pending().is_empty());
    }

    #[test]
    fn lookup_only_finds_sealed() {
        let mut c = chain_with(1);
        let sealed = c.blocks()[0].transactions[1].clone();
        assert_eq!(c.get_transaction(&sealed.t_id).unwrap(), &sealed);
        let pending = c.submit_transaction(TxKind::Register, "x", vec![1], 100.0).unwrap();
        assert_eq!(
            c.get_transaction(&pending),
            Err(LedgerError::UnknownTransaction(pending))
        );
        let random = Hash32::of(b"nope");
        assert!(c.get_transaction(&random).is_err());
    }

    #[test]
    fn tamper_cases() {
        let c = chain_with(5);
        assert_eq!(c.verify_chain(), ChainVerdict::Valid);

        let mut blocks = c.blocks().to_vec();
        blocks[2].transactions[0].payload[0] ^= 1;
        assert_eq!(verify_blocks(&blocks), ChainVerdict::Invalid(2));

        let mut blocks = c.blocks().to_vec();
        blocks[1].block_hash = Hash32::of(b"random");
        assert_eq!(verify_blocks(&blocks), ChainVerdict::Invalid(1));

        let mut blocks = c.blocks().to_vec();
        blocks.swap(3, 4);
        assert_eq!(verify_blocks(&blocks), ChainVerdict::Invalid(3));
    }

    #[test]
    fn reads_do_not_touch_sealed_blocks() {
        let mut c = chain_with(3);
        let before = c.fingerprint();
        let id = c.blocks()[1].transactions[0].t_id;
        let _ = c.get_transaction(&id);
        let _ = c.verify_chain();
        let _ = export::to_jsonl(&c);
        c.submit_transaction(TxKind::Register, "late", vec![1], 99.0).unwrap();
        assert_eq!(c.fingerprint(), before);
    }
}
