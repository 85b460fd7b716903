//! DABE challenge-response peer authentication and channel-key derivation.

use rand::RngCore;
use sha2::{Digest, Sha256};

use super::ProtocolError;
use crate::dabe::{dabe_decrypt, dabe_encrypt, AccessPolicy, AuthorityDirectory, DabeCiphertext, UserKeyring};
use crate::ledger::Hash;

/// A fresh challenge issued by the responder.
#[derive(Debug, Clone)]
pub struct Challenge {
    pub ct: DabeCiphertext,
    expected: [u8; 32],
}

impl Challenge {
    /// Encrypts 32 fresh random bytes under `policy`.
    pub fn issue(
        policy: &AccessPolicy,
        directory: &AuthorityDirectory,
        epoch: u64,
        rng: &mut impl RngCore,
    ) -> Result<Self, ProtocolError> {
        let mut expected = [0u8; 32];
        rng.fill_bytes(&mut expected);
        let ct = dabe_encrypt(&expected, policy, directory, epoch, rng)?;
        Ok(Self { ct, expected })
    }

    /// Checks the initiator's echo against the issued challenge.
    pub fn verify(&self, echo: &[u8]) -> Result<Session, ProtocolError> {
        if echo != self.expected {
            return Err(ProtocolError::AuthFailed("challenge echo does not match".into()));
        }
        Ok(Session { challenge: self.expected, transcript: Sha256::digest(self.ct.to_bytes()).into() })
    }
}

/// Initiator side: opens the challenge with its keyring.
pub fn respond(ct: &DabeCiphertext, keyring: &UserKeyring) -> Result<Vec<u8>, ProtocolError> {
    dabe_decrypt(ct, keyring).map_err(|e| ProtocolError::AuthFailed(e.to_string()))
}

/// Outcome of a successful authentication.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    challenge: [u8; 32],
    /// Hash of the challenge ciphertext; logged in the KeyEvent.
    pub transcript: Hash,
}

impl Session {
    /// Symmetric key for the `(a, b)` pair, independent of argument order.
    pub fn channel_key(&self, a: &str, b: &str) -> [u8; 32] {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut h = Sha256::new();
        h.update(b"fldabe-channel-v1");
        h.update((lo.len() as u32).to_be_bytes());
        h.update(lo);
        h.update((hi.len() as u32).to_be_bytes());
        h.update(hi);
        h.update(self.challenge);
        h.finalize().into()
    }
}

/// Full exchange: the responder challenges under `policy`, the initiator
/// answers with `keyring`.
pub fn authenticate_peer(
    keyring: &UserKeyring,
    policy: &AccessPolicy,
    directory: &AuthorityDirectory,
    rng: &mut impl RngCore,
) -> Result<Session, ProtocolError> {
    let challenge = Challenge::issue(policy, directory, keyring.epoch, rng)?;
    let echo = respond(&challenge.ct, keyring)?;
    challenge.verify(&echo)
}

/// A per-pair key as held by both endpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelKey {
    pub pair: (String, String),
    pub key: [u8; 32],
}
