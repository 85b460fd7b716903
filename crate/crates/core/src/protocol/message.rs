//! Protocol messages and their canonical wire form.
//!
//! An [`Envelope`] is `header || body || tx`. The ledger transaction commits to
//! `SHA-256(header || body)`, so a receiver can compare what arrived with what
//! the sender logged.

use std::fmt;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::dabe::DabeCiphertext;
use crate::he::HeCiphertext;
use crate::ledger::{Hash, Transaction, TxKind, TxNonce};
use crate::wire::{DecodeError, Reader, Writer};

/// The four message types of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Edge {
    /// Device to fog: local update.
    M1,
    /// Fog to microservice: forwarded batch.
    M2,
    /// Microservice to cloud: HE-encrypted partial aggregate.
    M3,
    /// Cloud to devices: global model.
    M4,
}

impl Edge {
    pub const ALL: [Edge; 4] = [Edge::M1, Edge::M2, Edge::M3, Edge::M4];

    pub fn tx_kind(self) -> TxKind {
        match self {
            Edge::M1 => TxKind::DataTransfer,
            Edge::M2 => TxKind::ModelForward,
            Edge::M3 => TxKind::Aggregation,
            Edge::M4 => TxKind::GlobalUpdate,
        }
    }

    fn code(self) -> u8 {
        self as u8 + 1
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get((c as usize).wrapping_sub(1)).copied()
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.to_string().eq_ignore_ascii_case(s))
    }
}

impl Serialize for Edge {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Edge {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Edge::parse(&s).ok_or_else(|| de::Error::custom(format!("unknown edge {s:?}, expected M1..M4")))
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub sender: String,
    pub receiver: String,
    pub round: u64,
    pub nonce: TxNonce,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    M1 { ct: DabeCiphertext },
    M2 { ct: DabeCiphertext },
    M3 { cts: Vec<HeCiphertext>, transcript_hash: Hash, sample_count: u64 },
    M4 { ct: DabeCiphertext },
}

impl Body {
    pub fn edge(&self) -> Edge {
        match self {
            Body::M1 { .. } => Edge::M1,
            Body::M2 { .. } => Edge::M2,
            Body::M3 { .. } => Edge::M3,
            Body::M4 { .. } => Edge::M4,
        }
    }

    /// The DABE ciphertext carried by M1, M2 and M4.
    pub fn dabe(&self) -> Option<&DabeCiphertext> {
        match self {
            Body::M1 { ct } | Body::M2 { ct } | Body::M4 { ct } => Some(ct),
            Body::M3 { .. } => None,
        }
    }

    pub fn dabe_mut(&mut self) -> Option<&mut DabeCiphertext> {
        match self {
            Body::M1 { ct } | Body::M2 { ct } | Body::M4 { ct } => Some(ct),
            Body::M3 { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub header: Header,
    pub body: Body,
    /// Copy of the ledger transaction the sender logged for this message.
    pub tx: Transaction,
}

impl Envelope {
    fn encode_content(header: &Header, body: &Body, w: &mut Writer) {
        w.raw(b"fldabe-msg-v1")
            .u8(body.edge().code())
            .str(&header.sender)
            .str(&header.receiver)
            .u64(header.round)
            .raw(&header.nonce);
        match body {
            Body::M1 { ct } | Body::M2 { ct } | Body::M4 { ct } => ct.encode(w),
            Body::M3 { cts, transcript_hash, sample_count } => {
                w.u32(cts.len() as u32);
                cts.iter().for_each(|c| c.encode(w));
                w.raw(transcript_hash).u64(*sample_count);
            }
        }
    }

    /// Hash logged in the message's ledger transaction.
    pub fn payload_hash_of(header: &Header, body: &Body) -> Hash {
        let mut w = Writer::new();
        Self::encode_content(header, body, &mut w);
        Sha256::digest(w.finish()).into()
    }

    pub fn payload_hash(&self) -> Hash {
        Self::payload_hash_of(&self.header, &self.body)
    }

    pub fn edge(&self) -> Edge {
        self.body.edge()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        Self::encode_content(&self.header, &self.body, &mut w);
        w.raw(&self.tx.signing_bytes()).raw(&self.tx.signature);
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        let magic: [u8; 13] = r.array()?;
        if &magic != b"fldabe-msg-v1" {
            return Err(r.invalid("message magic"));
        }
        let edge = Edge::from_code(r.u8()?).ok_or_else(|| r.invalid("message type"))?;
        let header = Header { sender: r.string()?, receiver: r.string()?, round: r.u64()?, nonce: r.array()? };
        let body = match edge {
            Edge::M1 => Body::M1 { ct: DabeCiphertext::decode(&mut r)? },
            Edge::M2 => Body::M2 { ct: DabeCiphertext::decode(&mut r)? },
            Edge::M4 => Body::M4 { ct: DabeCiphertext::decode(&mut r)? },
            Edge::M3 => {
                let n = r.count(20)?;
                let cts = (0..n).map(|_| HeCiphertext::decode(&mut r)).collect::<Result<_, _>>()?;
                Body::M3 { cts, transcript_hash: r.array()?, sample_count: r.u64()? }
            }
        };
        let tx_magic: [u8; 12] = r.array()?;
        if &tx_magic != b"fldabe-tx-v1" {
            return Err(r.invalid("transaction magic"));
        }
        let kind = TxKind::from_code(r.u8()?).ok_or_else(|| r.invalid("transaction kind"))?;
        let sender = r.string()?;
        let payload_hash = r.bytes()?.try_into().map_err(|_| r.invalid("payload hash length"))?;
        let nonce = r.bytes()?.try_into().map_err(|_| r.invalid("nonce length"))?;
        let sim_time = r.u64()?;
        let signature = r.array()?;
        r.finish()?;
        Ok(Self { header, body, tx: Transaction { kind, sender, payload_hash, nonce, sim_time, signature } })
    }
}

/// Plaintext of an M1: one device's fixed-point weights and sample count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalUpdate {
    pub device: String,
    pub round: u64,
    pub samples: u64,
    pub fixed: Vec<i64>,
}

impl LocalUpdate {
    fn encode(&self, w: &mut Writer) {
        w.str(&self.device).u64(self.round).u64(self.samples).u32(self.fixed.len() as u32);
        for v in &self.fixed {
            w.u64(*v as u64);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let device = r.string()?;
        let round = r.u64()?;
        let samples = r.u64()?;
        let n = r.count(8)?;
        let fixed = (0..n).map(|_| r.u64().map(|v| v as i64)).collect::<Result<_, _>>()?;
        Ok(Self { device, round, samples, fixed })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        let u = Self::decode(&mut r)?;
        r.finish()?;
        Ok(u)
    }

    /// Just the weight encoding, as it appears inside [`Self::to_bytes`].
    pub fn weight_bytes(&self) -> Vec<u8> {
        self.fixed.iter().flat_map(|v| v.to_be_bytes()).collect()
    }
}

/// Plaintext of an M2.
pub fn encode_batch(batch: &[LocalUpdate]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(batch.len() as u32);
    batch.iter().for_each(|u| u.encode(&mut w));
    w.finish()
}

pub fn decode_batch(b: &[u8]) -> Result<Vec<LocalUpdate>, DecodeError> {
    let mut r = Reader::new(b);
    let n = r.count(24)?;
    let batch = (0..n).map(|_| LocalUpdate::decode(&mut r)).collect::<Result<_, _>>()?;
    r.finish()?;
    Ok(batch)
}

/// Plaintext of an M4.
pub fn encode_global(round: u64, weights: &[f64]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(round).u32(weights.len() as u32);
    for v in weights {
        w.u64(v.to_bits());
    }
    w.finish()
}

pub fn decode_global(b: &[u8]) -> Result<(u64, Vec<f64>), DecodeError> {
    let mut r = Reader::new(b);
    let round = r.u64()?;
    let n = r.count(8)?;
    let w = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(DecodeError::Invalid { what: "non-finite weight", offset: 12 });
    }
    Ok((round, w))
}
