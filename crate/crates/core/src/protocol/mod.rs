//! Node state machines and the four-message round.
//!
//! Per round:
//!
//! 1. devices train locally and authenticate to their fog node,
//! 2. **M1** device to fog: fixed-point weights under a DABE fog policy,
//! 3. **M2** fog to microservice: the decrypted batch, re-encrypted for microservices,
//! 4. **M3** microservice to cloud: weighted partial sums, blinded across
//!    microservices by additive sharing and encrypted under the cloud's Paillier key,
//! 5. the cloud sums the ciphertexts, decrypts, divides, optionally adds Gaussian noise,
//! 6. **M4** cloud to devices: the new global model under the device-population policy.
//!
//! Every message is mirrored by a signed ledger transaction, and every peer
//! authentication by a KeyEvent transaction. Network behaviour (latency, loss,
//! adversaries) is supplied through [`Transport`].

pub mod auth;
mod deploy;
pub mod message;

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::dabe::DabeError;
use crate::dp::DpError;
use crate::flcore::FlError;
use crate::he::HeError;
use crate::ledger::{Ledger, LedgerError};
use crate::smpc::SmpcError;
use crate::wire::DecodeError;

pub use auth::{authenticate_peer, ChannelKey, Session};
pub use deploy::{authority_universes, edge_policy, training_seed, Deployment, DeploymentConfig, RoundReport, BROADCAST};
pub use message::{Body, Edge, Envelope, Header, LocalUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeRole {
    Device,
    FogNode,
    Microservice,
    CloudServer,
    Ledger,
}

pub const CLOUD_ID: &str = "cloud";

pub fn device_id(k: usize) -> String {
    format!("dev-{k}")
}

pub fn fog_id(f: usize) -> String {
    format!("fog-{f}")
}

pub fn ms_id(m: usize) -> String {
    format!("ms-{m}")
}

/// Role of a node identifier produced by the helpers above.
pub fn role_of(id: &str) -> Option<NodeRole> {
    match id.split_once('-').map(|(p, _)| p).unwrap_or(id) {
        "dev" => Some(NodeRole::Device),
        "fog" => Some(NodeRole::FogNode),
        "ms" => Some(NodeRole::Microservice),
        "cloud" => Some(NodeRole::CloudServer),
        "sealer" => Some(NodeRole::Ledger),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Phase {
    Distribute,
    LocalTrain,
    Upload,
    FogAggregate,
    CloudAggregate,
    Broadcast,
    Done,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Where a round is and what it is still waiting for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundState {
    pub round: u64,
    pub phase: Phase,
    /// Outstanding expectations, e.g. `"M2 fog-0 -> ms-0"`.
    pub pending: Vec<String>,
}

impl RoundState {
    fn advance(&mut self, phase: Phase) {
        debug_assert!(phase >= self.phase, "phases only move forward");
        self.phase = phase;
        self.pending.clear();
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("authentication failed: {0}")]
    AuthFailed(String),
    #[error("round {round} stalled in phase {phase}; waiting for {}", missing.join(", "))]
    Stalled { round: u64, phase: Phase, missing: Vec<String> },
    #[error("a round needs at least one device")]
    NoDevices,
    #[error("invalid deployment: {0}")]
    Config(String),
    #[error(transparent)]
    Dabe(#[from] DabeError),
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Smpc(#[from] SmpcError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("malformed message: {0}")]
    Decode(#[from] DecodeError),
}

/// Why a receiver dropped an inbound envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    WrongReceiver,
    WrongRound,
    WrongEdge,
    /// No ledger transaction with this sender and nonce.
    NoTransaction,
    /// The logged transaction's kind or payload hash differs from the message.
    TxMismatch,
    /// This receiver already consumed the transaction.
    Replay,
    /// Sender did not authenticate to the receiver this round.
    Unauthenticated,
    Decryption(DabeError),
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accepted,
    Rejected(Rejection),
}

/// A principal trying to take part in M1 without the required attributes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Impostor {
    pub claimed_id: String,
    pub fog: usize,
    /// Attributes the impostor's authority issued, by name.
    pub attrs: Vec<String>,
}

/// The network between nodes. Implementations decide latency, loss and
/// tampering; the deployment only sees what arrives.
pub trait Transport {
    /// Carries `env` to `to`; returns arrivals as `(tick, envelope)`.
    fn carry(&mut self, env: &Envelope, to: &str, now: u64) -> Vec<(u64, Envelope)>;

    /// Extra traffic injected when `edge` opens in `round`: `(receiver, tick, envelope)`.
    fn inject(&mut self, _round: u64, _edge: Edge, _ledger: &mut Ledger, _now: u64) -> Vec<(String, u64, Envelope)> {
        Vec::new()
    }

    /// Impostors joining the upload phase of `round`.
    fn impostors(&mut self, _round: u64) -> Vec<Impostor> {
        Vec::new()
    }

    /// Receiver-side outcome of every envelope that arrived.
    fn verdict(&mut self, _to: &str, _env: &Envelope, _verdict: &Verdict) {}

    /// Whether an impostor was stopped (`rejected`) and whether any of its
    /// content entered a batch (`accepted`).
    fn impostor_outcome(&mut self, _impostor: &Impostor, _rejected: bool, _accepted: bool) {}
}

/// Lossless transport with one tick of latency.
#[derive(Debug, Clone, Copy, Default)]
pub struct DirectTransport;

impl Transport for DirectTransport {
    fn carry(&mut self, env: &Envelope, _to: &str, now: u64) -> Vec<(u64, Envelope)> {
        vec![(now + 1, env.clone())]
    }
}
