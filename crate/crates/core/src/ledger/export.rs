//! JSON-lines chain export: one block per line, byte strings hex-encoded.
//!
//! The export is canonical. Parsing re-renders every block and insists on a
//! byte-exact match, so any edit to the file is attributed to the line (and
//! therefore the block height) it touched.

use std::collections::BTreeMap;

use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};

use super::{verify_blocks, Block, ChainFault, FaultReason, Transaction, TxKind};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRegistration {
    id: String,
    key: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonTx {
    kind: String,
    sender: String,
    payload_hash: String,
    nonce: String,
    sim_time: u64,
    signature: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonBlock {
    height: u64,
    hash: String,
    prev_hash: String,
    registrations: Vec<JsonRegistration>,
    tx_root: String,
    txs: Vec<JsonTx>,
    sealer_signature: String,
}

fn to_json(b: &Block) -> JsonBlock {
    JsonBlock {
        height: b.height,
        hash: hex::encode(b.hash()),
        prev_hash: hex::encode(b.prev_hash),
        registrations: b
            .registrations
            .iter()
            .map(|(id, k)| JsonRegistration { id: id.clone(), key: hex::encode(k) })
            .collect(),
        tx_root: hex::encode(b.tx_root),
        txs: b
            .txs
            .iter()
            .map(|t| JsonTx {
                kind: t.kind.name().to_string(),
                sender: t.sender.clone(),
                payload_hash: hex::encode(t.payload_hash),
                nonce: hex::encode(t.nonce),
                sim_time: t.sim_time,
                signature: hex::encode(t.signature),
            })
            .collect(),
        sealer_signature: hex::encode(b.sealer_signature),
    }
}

fn unhex<const N: usize>(s: &str) -> Option<[u8; N]> {
    let v = hex::decode(s).ok()?;
    v.try_into().ok()
}

fn from_json(j: &JsonBlock) -> Option<Block> {
    let registrations = j
        .registrations
        .iter()
        .map(|r| Some((r.id.clone(), unhex(&r.key)?)))
        .collect::<Option<Vec<_>>>()?;
    let txs = j
        .txs
        .iter()
        .map(|t| {
            Some(Transaction {
                kind: TxKind::from_name(&t.kind)?,
                sender: t.sender.clone(),
                payload_hash: unhex(&t.payload_hash)?,
                nonce: unhex(&t.nonce)?,
                sim_time: t.sim_time,
                signature: unhex(&t.signature)?,
            })
        })
        .collect::<Option<Vec<_>>>()?;
    Some(Block {
        height: j.height,
        prev_hash: unhex(&j.prev_hash)?,
        registrations,
        tx_root: unhex(&j.tx_root)?,
        txs,
        sealer_signature: unhex(&j.sealer_signature)?,
    })
}

fn block_line(b: &Block) -> String {
    serde_json::to_string(&to_json(b)).expect("plain structs serialize")
}

pub fn export_jsonl(chain: &[Block]) -> String {
    let mut out = String::new();
    for b in chain {
        out.push_str(&block_line(b));
        out.push('\n');
    }
    out
}

fn parse_line(line: &[u8], height: u64) -> Result<Block, ChainFault> {
    let malformed = ChainFault { height, reason: FaultReason::Malformed };
    let text = std::str::from_utf8(line).map_err(|_| malformed)?;
    let j: JsonBlock = serde_json::from_str(text).map_err(|_| malformed)?;
    let block = from_json(&j).ok_or(malformed)?;
    if j.hash != hex::encode(block.hash()) {
        return Err(ChainFault { height, reason: FaultReason::BlockHash });
    }
    if block_line(&block) != text {
        return Err(malformed);
    }
    Ok(block)
}

/// Decodes and verifies an exported chain. The first fault is reported with
/// the height of the line it was found on.
pub fn parse_jsonl(data: &[u8], sealer: Option<&VerifyingKey>) -> Result<Vec<Block>, ChainFault> {
    let mut blocks = Vec::new();
    let mut rest = data;
    let mut line_fault = None;
    while !rest.is_empty() {
        let height = blocks.len() as u64;
        let (line, next, terminated) = match rest.iter().position(|&c| c == b'\n') {
            Some(i) => (&rest[..i], &rest[i + 1..], true),
            None => (rest, &rest[rest.len()..], false),
        };
        let parsed = parse_line(line, height).and_then(|b| {
            if terminated {
                Ok(b)
            } else {
                Err(ChainFault { height, reason: FaultReason::Malformed })
            }
        });
        match parsed {
            Ok(b) => blocks.push(b),
            Err(f) => {
                line_fault = Some(f);
                break;
            }
        }
        rest = next;
    }
    verify_blocks(&blocks, sealer)?;
    match line_fault {
        Some(f) => Err(f),
        None if blocks.is_empty() => Err(ChainFault { height: 0, reason: FaultReason::Malformed }),
        None => Ok(blocks),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub blocks: usize,
    pub txs_by_kind: BTreeMap<TxKind, usize>,
    pub senders: usize,
    /// `(sender, nonce)` pairs rebuilt from the chain.
    pub nonces: usize,
    pub fault: Option<ChainFault>,
}

impl AuditReport {
    pub fn core_txs(&self) -> usize {
        self.txs_by_kind.iter().filter(|(k, _)| k.is_core()).map(|(_, n)| n).sum()
    }

    pub fn is_clean(&self) -> bool {
        self.fault.is_none()
    }
}

/// Verifies an export and summarizes it. A fault does not abort the audit;
/// it is recorded and the counts cover the verified prefix.
pub fn audit_export(data: &[u8], sealer: Option<&VerifyingKey>) -> AuditReport {
    let (blocks, fault) = match parse_jsonl(data, sealer) {
        Ok(b) => (b, None),
        Err(f) => {
            // Re-parse the prefix before the faulty block for the counts.
            let prefix: Vec<Block> = data
                .split(|&c| c == b'\n')
                .take(f.height as usize)
                .enumerate()
                .map_while(|(i, l)| parse_line(l, i as u64).ok())
                .collect();
            (prefix, Some(f))
        }
    };
    let mut txs_by_kind: BTreeMap<TxKind, usize> = TxKind::ALL.iter().map(|k| (*k, 0)).collect();
    let mut senders = std::collections::BTreeSet::new();
    let mut nonces = std::collections::BTreeSet::new();
    for tx in blocks.iter().flat_map(|b| &b.txs) {
        *txs_by_kind.entry(tx.kind).or_default() += 1;
        senders.insert(tx.sender.clone());
        nonces.insert((tx.sender.clone(), tx.nonce));
    }
    AuditReport { blocks: blocks.len(), txs_by_kind, senders: senders.len(), nonces: nonces.len(), fault }
}
