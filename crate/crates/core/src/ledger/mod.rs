//! Hash-chained, signed transaction log sealed by a single authority.
//!
//! Every protocol message is mirrored by a [`Transaction`] signed by its
//! sender. The sealer batches pending transactions into [`Block`]s; each block
//! commits to its predecessor, to its transactions, and to any verification
//! keys registered since the previous block.

mod export;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::RangeInclusive;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wire::Writer;

pub use export::{audit_export, export_jsonl, parse_jsonl, AuditReport};

pub type Hash = [u8; 32];
pub type TxNonce = [u8; 16];

/// Identity under which the sealer's own key is registered at genesis.
pub const SEALER_ID: &str = "sealer";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TxKind {
    DataTransfer,
    ModelForward,
    Aggregation,
    GlobalUpdate,
    KeyEvent,
}

impl TxKind {
    pub const ALL: [TxKind; 5] =
        [TxKind::DataTransfer, TxKind::ModelForward, TxKind::Aggregation, TxKind::GlobalUpdate, TxKind::KeyEvent];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TxKind::DataTransfer => "DataTransfer",
            TxKind::ModelForward => "ModelForward",
            TxKind::Aggregation => "Aggregation",
            TxKind::GlobalUpdate => "GlobalUpdate",
            TxKind::KeyEvent => "KeyEvent",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Kinds that correspond one-to-one with protocol messages.
    pub fn is_core(self) -> bool {
        self != TxKind::KeyEvent
    }
}

impl fmt::Display for TxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("replay detected: nonce {nonce} from {sender} already recorded")]
    ReplayDetected { sender: String, nonce: String },
    #[error("bad signature on transaction from {0}")]
    BadSignature(String),
    #[error("unknown sender {0}")]
    UnknownSender(String),
    #[error("sender {0} already registered with a different key")]
    DuplicateSender(String),
    #[error("no pending transactions to seal")]
    EmptyPool,
    #[error("ledger unavailable")]
    Offline,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Transaction {
    pub kind: TxKind,
    pub sender: String,
    pub payload_hash: Hash,
    pub nonce: TxNonce,
    pub sim_time: u64,
    pub signature: [u8; 64],
}

impl Transaction {
    pub fn signed(
        kind: TxKind,
        sender: &str,
        payload_hash: Hash,
        nonce: TxNonce,
        sim_time: u64,
        key: &SigningKey,
    ) -> Self {
        let mut tx = Self { kind, sender: sender.to_string(), payload_hash, nonce, sim_time, signature: [0; 64] };
        tx.signature = key.sign(&tx.signing_bytes()).to_bytes();
        tx
    }

    /// Canonical encoding of every field except the signature.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(b"fldabe-tx-v1")
            .u8(self.kind.code())
            .str(&self.sender)
            .bytes(&self.payload_hash)
            .bytes(&self.nonce)
            .u64(self.sim_time);
        w.finish()
    }

    pub fn hash(&self) -> Hash {
        let mut h = Sha256::new();
        h.update(self.signing_bytes());
        h.update(self.signature);
        h.finalize().into()
    }

    pub fn verify(&self, key: &VerifyingKey) -> bool {
        key.verify(&self.signing_bytes(), &Signature::from_bytes(&self.signature)).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Hash,
    /// Verification keys registered since the previous block, in registration order.
    pub registrations: Vec<(String, [u8; 32])>,
    pub tx_root: Hash,
    pub txs: Vec<Transaction>,
    pub sealer_signature: [u8; 64],
}

pub fn tx_root(txs: &[Transaction]) -> Hash {
    let mut h = Sha256::new();
    h.update(b"fldabe-txroot-v1");
    for tx in txs {
        h.update(tx.hash());
    }
    h.finalize().into()
}

impl Block {
    pub fn header_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(b"fldabe-block-v1").u64(self.height).bytes(&self.prev_hash).u32(self.registrations.len() as u32);
        for (id, key) in &self.registrations {
            w.str(id).bytes(key);
        }
        w.bytes(&self.tx_root);
        w.finish()
    }

    pub fn hash(&self) -> Hash {
        let mut h = Sha256::new();
        h.update(self.header_bytes());
        h.update(self.sealer_signature);
        h.finalize().into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultReason {
    Height,
    PrevHash,
    TxRoot,
    SealerSignature,
    /// Index of the transaction inside the block.
    TxSignature(usize),
    UnknownSender(usize),
    DuplicateNonce(usize),
    BadRegistration,
    /// The stored block hash disagrees with the recomputed one (export only).
    BlockHash,
    /// The encoded block could not be decoded (export only).
    Malformed,
}

impl fmt::Display for FaultReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultReason::Height => f.write_str("height"),
            FaultReason::PrevHash => f.write_str("prev_hash"),
            FaultReason::TxRoot => f.write_str("tx_root"),
            FaultReason::SealerSignature => f.write_str("sealer_signature"),
            FaultReason::TxSignature(i) => write!(f, "tx_signature[{i}]"),
            FaultReason::UnknownSender(i) => write!(f, "unknown_sender[{i}]"),
            FaultReason::DuplicateNonce(i) => write!(f, "duplicate_nonce[{i}]"),
            FaultReason::BadRegistration => f.write_str("registration"),
            FaultReason::BlockHash => f.write_str("block_hash"),
            FaultReason::Malformed => f.write_str("malformed"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainFault {
    pub height: u64,
    pub reason: FaultReason,
}

impl fmt::Display for ChainFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fault at height {}: {}", self.height, self.reason)
    }
}

/// Checks a sequence of blocks from genesis. When `sealer` is `None` the key
/// registered under [`SEALER_ID`] in the genesis block is trusted.
pub fn verify_blocks(blocks: &[Block], sealer: Option<&VerifyingKey>) -> Result<(), ChainFault> {
    let mut keys: BTreeMap<&str, VerifyingKey> = BTreeMap::new();
    let mut seen: BTreeSet<(&str, TxNonce)> = BTreeSet::new();
    let mut sealer_key = sealer.copied();
    let mut prev = [0u8; 32];
    for (i, b) in blocks.iter().enumerate() {
        let fault = |reason| ChainFault { height: i as u64, reason };
        if b.height != i as u64 {
            return Err(fault(FaultReason::Height));
        }
        if b.prev_hash != prev {
            return Err(fault(FaultReason::PrevHash));
        }
        if b.tx_root != tx_root(&b.txs) {
            return Err(fault(FaultReason::TxRoot));
        }
        if i == 0 && sealer_key.is_none() {
            let genesis = b.registrations.iter().find(|(id, _)| id == SEALER_ID);
            sealer_key = genesis.and_then(|(_, k)| VerifyingKey::from_bytes(k).ok());
        }
        let signed_ok = sealer_key
            .map(|k| k.verify(&b.header_bytes(), &Signature::from_bytes(&b.sealer_signature)).is_ok())
            .unwrap_or(false);
        if !signed_ok {
            return Err(fault(FaultReason::SealerSignature));
        }
        for (id, raw) in &b.registrations {
            let key = VerifyingKey::from_bytes(raw).map_err(|_| fault(FaultReason::BadRegistration))?;
            if keys.get(id.as_str()).is_some_and(|k| k != &key) {
                return Err(fault(FaultReason::BadRegistration));
            }
            keys.insert(id, key);
        }
        for (j, tx) in b.txs.iter().enumerate() {
            let key = keys.get(tx.sender.as_str()).ok_or(fault(FaultReason::UnknownSender(j)))?;
            if !tx.verify(key) {
                return Err(fault(FaultReason::TxSignature(j)));
            }
            if !seen.insert((&tx.sender, tx.nonce)) {
                return Err(fault(FaultReason::DuplicateNonce(j)));
            }
        }
        prev = b.hash();
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LogFilter {
    pub kind: Option<TxKind>,
    pub sender: Option<String>,
    pub heights: Option<RangeInclusive<u64>>,
}

impl LogFilter {
    pub fn kind(kind: TxKind) -> Self {
        Self { kind: Some(kind), ..Self::default() }
    }

    fn matches(&self, height: u64, tx: &Transaction) -> bool {
        self.kind.is_none_or(|k| k == tx.kind)
            && self.sender.as_ref().is_none_or(|s| s == &tx.sender)
            && self.heights.as_ref().is_none_or(|r| r.contains(&height))
    }
}

/// The chain plus the sealer's state.
pub struct Ledger {
    chain: Vec<Block>,
    pending: Vec<Transaction>,
    pending_registrations: Vec<(String, [u8; 32])>,
    keys: BTreeMap<String, VerifyingKey>,
    nonces: BTreeSet<(String, TxNonce)>,
    sealer: SigningKey,
    online: bool,
}

impl fmt::Debug for Ledger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ledger")
            .field("height", &self.chain.len())
            .field("pending", &self.pending.len())
            .field("senders", &self.keys.len())
            .finish()
    }
}

impl Ledger {
    /// Creates the chain with a genesis block registering the sealer key.
    pub fn new(sealer: SigningKey) -> Self {
        let mut l = Self {
            chain: Vec::new(),
            pending: Vec::new(),
            pending_registrations: Vec::new(),
            keys: BTreeMap::new(),
            nonces: BTreeSet::new(),
            sealer,
            online: true,
        };
        let vk = l.sealer.verifying_key();
        l.register(SEALER_ID, vk).expect("fresh ledger");
        l.append_block();
        l
    }

    pub fn sealer_key(&self) -> VerifyingKey {
        self.sealer.verifying_key()
    }

    pub fn register(&mut self, sender: &str, key: VerifyingKey) -> Result<(), LedgerError> {
        match self.keys.get(sender) {
            Some(k) if k == &key => Ok(()),
            Some(_) => Err(LedgerError::DuplicateSender(sender.to_string())),
            None => {
                self.keys.insert(sender.to_string(), key);
                self.pending_registrations.push((sender.to_string(), key.to_bytes()));
                Ok(())
            }
        }
    }

    pub fn is_registered(&self, sender: &str) -> bool {
        self.keys.contains_key(sender)
    }

    pub fn set_online(&mut self, online: bool) {
        self.online = online;
    }

    pub fn is_online(&self) -> bool {
        self.online
    }

    pub fn submit_transaction(&mut self, tx: Transaction) -> Result<(), LedgerError> {
        if !self.online {
            return Err(LedgerError::Offline);
        }
        let key = self.keys.get(&tx.sender).ok_or_else(|| LedgerError::UnknownSender(tx.sender.clone()))?;
        if !tx.verify(key) {
            return Err(LedgerError::BadSignature(tx.sender));
        }
        if !self.nonces.insert((tx.sender.clone(), tx.nonce)) {
            return Err(LedgerError::ReplayDetected { sender: tx.sender, nonce: hex::encode(tx.nonce) });
        }
        self.pending.push(tx);
        Ok(())
    }

    /// True iff `(sender, nonce)` was accepted before, sealed or pending.
    pub fn check_replay(&self, sender: &str, nonce: &TxNonce) -> bool {
        self.nonces.contains(&(sender.to_string(), *nonce))
    }

    pub fn pending(&self) -> &[Transaction] {
        &self.pending
    }

    pub fn seal_block(&mut self) -> Result<&Block, LedgerError> {
        if self.pending.is_empty() {
            return Err(LedgerError::EmptyPool);
        }
        if !self.online {
            return Err(LedgerError::Offline);
        }
        Ok(self.append_block())
    }

    fn append_block(&mut self) -> &Block {
        let mut txs = std::mem::take(&mut self.pending);
        txs.sort_by(|a, b| (a.sim_time, &a.sender, a.nonce).cmp(&(b.sim_time, &b.sender, b.nonce)));
        let mut block = Block {
            height: self.chain.len() as u64,
            prev_hash: self.chain.last().map(Block::hash).unwrap_or([0; 32]),
            registrations: std::mem::take(&mut self.pending_registrations),
            tx_root: tx_root(&txs),
            txs,
            sealer_signature: [0; 64],
        };
        block.sealer_signature = self.sealer.sign(&block.header_bytes()).to_bytes();
        self.chain.push(block);
        self.chain.last().expect("just pushed")
    }

    pub fn chain(&self) -> &[Block] {
        &self.chain
    }

    pub fn height(&self) -> u64 {
        self.chain.len() as u64 - 1
    }

    pub fn verify_chain(&self) -> Result<(), ChainFault> {
        verify_blocks(&self.chain, Some(&self.sealer.verifying_key()))
    }

    /// Sealed transactions matching `filter`, in chain order.
    pub fn query_log(&self, filter: &LogFilter) -> Vec<&Transaction> {
        self.chain
            .iter()
            .flat_map(|b| b.txs.iter().map(move |tx| (b.height, tx)))
            .filter(|(h, tx)| filter.matches(*h, tx))
            .map(|(_, tx)| tx)
            .collect()
    }

    /// Looks up a sealed or pending transaction by sender and nonce.
    pub fn find(&self, sender: &str, nonce: &TxNonce) -> Option<&Transaction> {
        self.chain
            .iter()
            .flat_map(|b| b.txs.iter())
            .chain(self.pending.iter())
            .find(|tx| tx.sender == sender && &tx.nonce == nonce)
    }

    pub fn export_jsonl(&self) -> String {
        export_jsonl(&self.chain)
    }

    /// Test hook: mutable access to sealed blocks for tampering experiments.
    #[doc(hidden)]
    pub fn chain_mut(&mut self) -> &mut Vec<Block> {
        &mut self.chain
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(i: u8) -> SigningKey {
        SigningKey::from_bytes(&[i; 32])
    }

    fn setup() -> (Ledger, SigningKey, SigningKey) {
        let mut l = Ledger::new(key(0));
        let (a, b) = (key(1), key(2));
        l.register("dev-0", a.verifying_key()).unwrap();
        l.register("dev-1", b.verifying_key()).unwrap();
        (l, a, b)
    }

    fn tx(k: &SigningKey, sender: &str, n: u8, t: u64) -> Transaction {
        Transaction::signed(TxKind::DataTransfer, sender, [n; 32], [n; 16], t, k)
    }

    #[test]
    fn genesis_is_valid() {
        let l = Ledger::new(key(0));
        assert_eq!(l.height(), 0);
        assert_eq!(l.chain()[0].prev_hash, [0; 32]);
        assert!(l.verify_chain().is_ok());
        assert!(l.query_log(&LogFilter::default()).is_empty());
    }

    #[test]
    fn submit_and_replay() {
        let (mut l, a, _) = setup();
        let t = tx(&a, "dev-0", 1, 5);
        l.submit_transaction(t.clone()).unwrap();
        assert!(matches!(l.submit_transaction(t.clone()), Err(LedgerError::ReplayDetected { .. })));
        l.seal_block().unwrap();
        assert!(l.check_replay("dev-0", &[1; 16]));
        assert!(!l.check_replay("dev-1", &[1; 16]));
        assert!(!l.check_replay("dev-0", &[2; 16]));
        assert!(matches!(l.submit_transaction(t), Err(LedgerError::ReplayDetected { .. })));
    }

    #[test]
    fn bad_signature_and_unknown_sender() {
        let (mut l, a, _) = setup();
        let mut t = tx(&a, "dev-0", 1, 5);
        t.payload_hash[0] ^= 1;
        assert_eq!(l.submit_transaction(t), Err(LedgerError::BadSignature("dev-0".into())));
        let t = tx(&a, "ghost", 1, 5);
        assert_eq!(l.submit_transaction(t), Err(LedgerError::UnknownSender("ghost".into())));
        // Signed by a key other than the registered one.
        let t = tx(&a, "dev-1", 3, 5);
        assert!(matches!(l.submit_transaction(t), Err(LedgerError::BadSignature(_))));
    }

    #[test]
    fn sealing_orders_and_links() {
        let (mut l, a, b) = setup();
        assert_eq!(l.seal_block().err(), Some(LedgerError::EmptyPool));
        l.submit_transaction(tx(&b, "dev-1", 9, 3)).unwrap();
        l.submit_transaction(tx(&a, "dev-0", 8, 3)).unwrap();
        l.submit_transaction(tx(&a, "dev-0", 7, 1)).unwrap();
        let blk = l.seal_block().unwrap().clone();
        assert_eq!(blk.height, 1);
        let order: Vec<(u64, &str, u8)> = blk.txs.iter().map(|t| (t.sim_time, t.sender.as_str(), t.nonce[0])).collect();
        assert_eq!(order, vec![(1, "dev-0", 7), (3, "dev-0", 8), (3, "dev-1", 9)]);
        assert_eq!(blk.prev_hash, l.chain()[0].hash());
        assert!(l.verify_chain().is_ok());
        l.submit_transaction(tx(&a, "dev-0", 10, 4)).unwrap();
        assert_eq!(l.seal_block().unwrap().height, 2);
        assert_eq!(l.query_log(&LogFilter::default()).len(), 4);
        let f = LogFilter { sender: Some("dev-0".into()), heights: Some(2..=2), ..LogFilter::default() };
        assert_eq!(l.query_log(&f).len(), 1);
    }

    #[test]
    fn tamper_detection() {
        let (mut l, a, b) = setup();
        for h in 0..3u8 {
            l.submit_transaction(tx(&a, "dev-0", 2 * h, h as u64)).unwrap();
            l.submit_transaction(tx(&b, "dev-1", 2 * h + 1, h as u64)).unwrap();
            l.seal_block().unwrap();
        }
        let pristine = l.chain().to_vec();

        l.chain_mut()[2].txs[1].payload_hash[4] ^= 0x10;
        assert_eq!(l.verify_chain(), Err(ChainFault { height: 2, reason: FaultReason::TxRoot }));
        *l.chain_mut() = pristine.clone();

        // Forgery re-sealed under another key, with correct links.
        let forger = key(99);
        let blk = &mut l.chain_mut()[2];
        blk.txs.pop();
        blk.tx_root = tx_root(&blk.txs);
        blk.sealer_signature = forger.sign(&blk.header_bytes()).to_bytes();
        assert_eq!(l.verify_chain(), Err(ChainFault { height: 2, reason: FaultReason::SealerSignature }));
        *l.chain_mut() = pristine;

        l.chain_mut()[1].prev_hash[0] ^= 1;
        assert_eq!(l.verify_chain().unwrap_err().height, 1);
    }

    #[test]
    fn registration_conflict() {
        let (mut l, _, b) = setup();
        assert_eq!(l.register("dev-0", b.verifying_key()), Err(LedgerError::DuplicateSender("dev-0".into())));
    }

    #[test]
    fn offline_rejects() {
        let (mut l, a, _) = setup();
        l.set_online(false);
        assert_eq!(l.submit_transaction(tx(&a, "dev-0", 1, 1)), Err(LedgerError::Offline));
    }
}
