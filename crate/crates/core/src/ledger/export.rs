//! JSON Lines export: one block per line, keys sorted, no whitespace.
//!
//! Each transaction carries its payload (base64) next to the digest so that
//! the chaincode state can be replayed from the file alone.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::canonical::{sorted_json, Hash32};
use super::{Block, ChainState, LedgerError, Transaction, TxKind};

#[derive(Debug, Serialize, Deserialize)]
struct TxLine {
    kind: String,
    payload: String,
    payload_digest: Hash32,
    sim_time_s: f64,
    submitter: String,
    t_id: Hash32,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockLine {
    block_hash: Hash32,
    index: u64,
    prev_hash: Hash32,
    transactions: Vec<TxLine>,
}

pub fn block_to_line(b: &Block) -> String {
    let line = BlockLine {
        block_hash: b.block_hash,
        index: b.index,
        prev_hash: b.prev_hash,
        transactions: b
            .transactions
            .iter()
            .map(|t| TxLine {
                kind: t.kind.as_str().to_owned(),
                payload: B64.encode(&t.payload),
                payload_digest: t.payload_digest,
                sim_time_s: t.sim_time_s,
                submitter: t.submitter.clone(),
                t_id: t.t_id,
            })
            .collect(),
    };
    String::from_utf8(sorted_json(&line)).expect("json is utf-8")
}

pub fn to_jsonl(chain: &ChainState) -> String {
    let mut out = String::new();
    for b in chain.blocks() {
        out.push_str(&block_to_line(b));
        out.push('\n');
    }
    out
}

/// Parses an export back into blocks. Stored hashes are taken as-is.
pub fn parse_jsonl(text: &str) -> Result<Vec<Block>, LedgerError> {
    let mut blocks = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bl: BlockLine = serde_json::from_str(line)
            .map_err(|e| LedgerError::Malformed(format!("line {}: {e}", n + 1)))?;
        let mut txs = Vec::with_capacity(bl.transactions.len());
        for t in bl.transactions {
            let kind: TxKind = t
                .kind
                .parse()
                .map_err(|e| LedgerError::Malformed(format!("line {}: {e}", n + 1)))?;
            let payload = B64
                .decode(&t.payload)
                .map_err(|e| LedgerError::Malformed(format!("line {}: {e}", n + 1)))?;
            txs.push(Transaction {
                t_id: t.t_id,
                kind,
                submitter: t.submitter,
                payload_digest: t.payload_digest,
                payload,
                sim_time_s: t.sim_time_s,
            });
        }
        blocks.push(Block {
            index: bl.index,
            prev_hash: bl.prev_hash,
            transactions: txs,
            block_hash: bl.block_hash,
        });
    }
    Ok(blocks)
}

/// Parses and rebuilds a chain; refuses chains that fail verification.
pub fn import_jsonl(text: &str) -> Result<ChainState, LedgerError> {
    let chain = ChainState::from_blocks(parse_jsonl(text)?);
    match chain.verify_chain() {
        super::ChainVerdict::Valid => Ok(chain),
        super::ChainVerdict::Invalid(i) => {
            Err(LedgerError::Malformed(format!("block {i} fails verification")))
        }
    }
}
