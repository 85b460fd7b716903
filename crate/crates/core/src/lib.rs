//! Privacy-preserving federated learning for edge/fog/cloud IoT deployments.
//!
//! The crate is organised bottom-up:
//!
//! * [`dabe`], [`he`], [`smpc`], [`dp`]: cryptographic and privacy primitives,
//! * [`ledger`]: the hash-chained, signed audit log every protocol message is written to,
//! * [`flcore`]: logistic-regression models, local training and federated averaging,
//! * [`protocol`]: device / fog / microservice / cloud state machines and the
//!   four-message round,
//! * [`simnet`]: a deterministic discrete-event harness with adversary injection,
//! * [`banlogic`]: a forward-chaining BAN-logic engine that checks the
//!   authentication goals of the round protocol.
//!
//! Everything is deterministic under an explicit seed. Data-parallel inner loops
//! (per-device training, per-coordinate Paillier work) go through [`par`], which
//! uses rayon when the `parallel` feature is on and plain iterators otherwise.

pub mod banlogic;
pub mod dabe;
pub mod dp;
pub mod flcore;
pub mod he;
pub mod ledger;
pub mod par;
pub mod protocol;
pub mod simnet;
pub mod smpc;
pub mod wire;

/// Expands a small integer seed into a 32-byte seed for `ChaCha20Rng` and key derivation.
pub fn seed_bytes(seed: u64, domain: &str) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(seed.to_be_bytes());
    h.finalize().into()
}

/// Seeded generator used throughout the crate.
pub fn seeded_rng(seed: u64, domain: &str) -> rand_chacha::ChaCha20Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha20Rng::from_seed(seed_bytes(seed, domain))
}
