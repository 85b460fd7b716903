//! Decentralized attribute-based encryption.
//!
//! Several attribute authorities each govern a disjoint set of attributes.
//! A payload is sealed under a fresh 32-byte data-encryption key (DEK); the DEK
//! is split over the ciphertext's access policy with a linear secret-sharing
//! scheme in GF(2^128) and every leaf share is wrapped with the attribute key of
//! that leaf. A keyring whose attributes satisfy the policy can unwrap enough
//! shares to rebuild the DEK.
//!
//! Attribute keys are derived per (authority, attribute, epoch) and are not bound
//! to the holder's GID, so colluding holders can pool keys. This construction
//! exercises the policy and sharing machinery without pairings; it is not
//! collusion resistant.

mod gf128;
mod policy;

use std::collections::{BTreeMap, BTreeSet};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hmac::{Hmac, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

pub use gf128::Gf128;
pub use policy::{policy_satisfied, AccessPolicy, Attribute, MAX_POLICY_DEPTH};

use crate::wire::{DecodeError, Reader, Writer};

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
const WRAP_LEN: usize = NONCE_LEN + 32 + TAG_LEN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DabeError {
    #[error("attribute `{attribute}` is already governed by authority `{owner}`")]
    UniverseConflict { attribute: String, owner: String },
    #[error("authority `{0}` is already registered")]
    DuplicateAuthority(String),
    #[error("authority universe must not be empty")]
    EmptyUniverse,
    #[error("attribute `{0}` is outside the authority's universe")]
    ForeignAttribute(String),
    #[error("attribute `{0}` is not governed by any registered authority")]
    UnknownAttribute(String),
    #[error("invalid attribute `{0}`")]
    InvalidAttribute(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("policy parse error at offset {offset}: {message}")]
    PolicyParse { offset: usize, message: String },
    #[error("keyring attributes do not satisfy the ciphertext policy")]
    PolicyNotSatisfied,
    #[error("keyring epoch {keyring} does not match ciphertext epoch {ciphertext}")]
    EpochMismatch { keyring: u64, ciphertext: u64 },
    #[error("ciphertext failed authentication")]
    AuthenticationFailure,
    #[error("keyrings for different holders or epochs cannot be merged")]
    KeyringMismatch,
    #[error("malformed key material: {0}")]
    KeyMaterial(String),
}

type HmacSha256 = Hmac<Sha256>;

fn prf(key: &[u8], msg: &[u8]) -> [u8; 32] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(msg);
    mac.finalize().into_bytes().into()
}

/// One attribute authority. The master secret never leaves this module.
#[derive(Clone)]
pub struct AttributeAuthority {
    id: String,
    master_secret: [u8; 32],
    universe: BTreeSet<Attribute>,
}

impl std::fmt::Debug for AttributeAuthority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AttributeAuthority").field("id", &self.id).field("universe", &self.universe).finish()
    }
}

/// Creates an authority governing `universe` (attribute names).
///
/// The master secret is `HMAC-SHA256(seed, authority_id)`, so setup is fully
/// determined by the seed.
pub fn authority_setup(authority_id: &str, universe: &[&str], seed: &[u8; 32]) -> Result<AttributeAuthority, DabeError> {
    if universe.is_empty() {
        return Err(DabeError::EmptyUniverse);
    }
    let universe = universe.iter().map(|n| Attribute::new(authority_id, n)).collect::<Result<BTreeSet<_>, _>>()?;
    Ok(AttributeAuthority { id: authority_id.to_string(), master_secret: prf(seed, authority_id.as_bytes()), universe })
}

impl AttributeAuthority {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn universe(&self) -> &BTreeSet<Attribute> {
        &self.universe
    }

    pub fn attribute(&self, name: &str) -> Option<&Attribute> {
        self.universe.iter().find(|a| a.name == name)
    }

    /// Identifies the master secret without revealing it.
    pub fn fingerprint(&self) -> [u8; 32] {
        prf(&self.master_secret, b"fingerprint")
    }

    fn attribute_key(&self, attr: &Attribute, epoch: u64) -> [u8; 32] {
        let mut w = Writer::new();
        attr.encode(&mut w);
        w.u64(epoch);
        prf(&self.master_secret, &w.finish())
    }

    /// Issues keys for `attrs` (names) at `epoch`.
    pub fn keygen_user(&self, gid: &str, attrs: &[&str], epoch: u64) -> Result<UserKeyring, DabeError> {
        let mut keys = BTreeMap::new();
        for name in attrs {
            let attr = self.attribute(name).ok_or_else(|| DabeError::ForeignAttribute(name.to_string()))?;
            keys.insert(attr.clone(), self.attribute_key(attr, epoch));
        }
        Ok(UserKeyring { gid: gid.to_string(), epoch, keys })
    }
}

/// Registry of authorities. Append-only; universes are disjoint by attribute name.
#[derive(Debug, Clone, Default)]
pub struct AuthorityDirectory {
    authorities: Vec<AttributeAuthority>,
    owner_of: BTreeMap<String, usize>,
}

impl AuthorityDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, authority: AttributeAuthority) -> Result<(), DabeError> {
        if self.authorities.iter().any(|a| a.id == authority.id) {
            return Err(DabeError::DuplicateAuthority(authority.id));
        }
        for attr in &authority.universe {
            if let Some(&i) = self.owner_of.get(&attr.name) {
                return Err(DabeError::UniverseConflict {
                    attribute: attr.name.clone(),
                    owner: self.authorities[i].id.clone(),
                });
            }
        }
        let idx = self.authorities.len();
        for attr in &authority.universe {
            self.owner_of.insert(attr.name.clone(), idx);
        }
        self.authorities.push(authority);
        Ok(())
    }

    /// `authority_setup` followed by `register`.
    pub fn setup_authority(&mut self, authority_id: &str, universe: &[&str], seed: &[u8; 32]) -> Result<&AttributeAuthority, DabeError> {
        self.register(authority_setup(authority_id, universe, seed)?)?;
        Ok(self.authorities.last().unwrap())
    }

    pub fn authority(&self, id: &str) -> Option<&AttributeAuthority> {
        self.authorities.iter().find(|a| a.id == id)
    }

    pub fn authorities(&self) -> &[AttributeAuthority] {
        &self.authorities
    }

    /// Looks an attribute up by name.
    pub fn resolve(&self, name: &str) -> Option<Attribute> {
        self.owner_of.get(name).and_then(|&i| self.authorities[i].attribute(name).cloned())
    }

    pub fn parse_policy(&self, text: &str) -> Result<AccessPolicy, DabeError> {
        AccessPolicy::parse(text, |n| self.resolve(n))
    }

    fn governing(&self, attr: &Attribute) -> Option<&AttributeAuthority> {
        self.owner_of
            .get(&attr.name)
            .map(|&i| &self.authorities[i])
            .filter(|a| a.id == attr.authority_id && a.universe.contains(attr))
    }
}

/// Attribute keys held by one user, all from the same epoch.
#[derive(Clone, PartialEq, Eq)]
pub struct UserKeyring {
    pub gid: String,
    pub epoch: u64,
    keys: BTreeMap<Attribute, [u8; 32]>,
}

impl std::fmt::Debug for UserKeyring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UserKeyring")
            .field("gid", &self.gid)
            .field("epoch", &self.epoch)
            .field("attributes", &self.keys.keys().map(|a| a.name.as_str()).collect::<Vec<_>>())
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct KeyringJson {
    gid: String,
    epoch: u64,
    keys: Vec<KeyJson>,
}

#[derive(Serialize, Deserialize)]
struct KeyJson {
    authority: String,
    name: String,
    key_hex: String,
}

impl UserKeyring {
    pub fn empty(gid: &str, epoch: u64) -> Self {
        Self { gid: gid.to_string(), epoch, keys: BTreeMap::new() }
    }

    pub fn attributes(&self) -> BTreeSet<&Attribute> {
        self.keys.keys().collect()
    }

    pub fn key(&self, attr: &Attribute) -> Option<&[u8; 32]> {
        self.keys.get(attr)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Combines partial keyrings issued by different authorities.
    pub fn merge(mut self, other: UserKeyring) -> Result<Self, DabeError> {
        if self.gid != other.gid || self.epoch != other.epoch {
            return Err(DabeError::KeyringMismatch);
        }
        self.keys.extend(other.keys);
        Ok(self)
    }

    /// Drops the key for `name`, if held.
    pub fn without(mut self, name: &str) -> Self {
        self.keys.retain(|a, _| a.name != name);
        self
    }

    pub fn to_json(&self) -> String {
        let j = KeyringJson {
            gid: self.gid.clone(),
            epoch: self.epoch,
            keys: self
                .keys
                .iter()
                .map(|(a, k)| KeyJson { authority: a.authority_id.clone(), name: a.name.clone(), key_hex: hex::encode(k) })
                .collect(),
        };
        serde_json::to_string_pretty(&j).expect("keyring serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, DabeError> {
        let j: KeyringJson = serde_json::from_str(s).map_err(|e| DabeError::KeyMaterial(e.to_string()))?;
        let mut keys = BTreeMap::new();
        for k in j.keys {
            let attr = Attribute::new(&k.authority, &k.name)?;
            let bytes: [u8; 32] = hex::decode(&k.key_hex)
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| DabeError::KeyMaterial(format!("bad key for `{}`", k.name)))?;
            keys.insert(attr, bytes);
        }
        Ok(Self { gid: j.gid, epoch: j.epoch, keys })
    }
}

/// Policy-protected payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DabeCiphertext {
    pub policy: AccessPolicy,
    pub epoch: u64,
    /// `(leaf index, nonce || wrapped share || tag)` for every policy leaf.
    pub wrapped_shares: Vec<(u32, Vec<u8>)>,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

fn header_bytes(policy: &AccessPolicy, epoch: u64) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(b"dabe-v1");
    policy.encode(&mut w);
    w.u64(epoch);
    w.finish()
}

fn wrap_aad(header: &[u8], leaf: u32) -> Vec<u8> {
    let mut aad = header.to_vec();
    aad.extend_from_slice(&leaf.to_be_bytes());
    aad
}

fn payload_aad(header: &[u8], wrapped: &[(u32, Vec<u8>)], nonce: &[u8; NONCE_LEN]) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(header);
    w.u32(wrapped.len() as u32);
    for (i, b) in wrapped {
        w.u32(*i).bytes(b);
    }
    w.raw(nonce);
    w.finish()
}

/// Seals `payload` so that only keyrings satisfying `policy` at `epoch` can open it.
pub fn dabe_encrypt(
    payload: &[u8],
    policy: &AccessPolicy,
    authorities: &AuthorityDirectory,
    epoch: u64,
    rng: &mut impl RngCore,
) -> Result<DabeCiphertext, DabeError> {
    policy.validate()?;
    let leaves = policy.leaves();
    let leaf_keys = leaves
        .iter()
        .map(|a| {
            authorities
                .governing(a)
                .map(|auth| auth.attribute_key(a, epoch))
                .ok_or_else(|| DabeError::UnknownAttribute(a.name.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut dek = [0u8; 32];
    rng.fill_bytes(&mut dek);
    let shares = policy::share(policy, policy::secret_from_bytes(&dek), rng);
    let header = header_bytes(policy, epoch);

    let mut wrapped_shares = Vec::with_capacity(shares.len());
    for (i, (share, key)) in shares.iter().zip(&leaf_keys).enumerate() {
        let mut n = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut n);
        let aead = ChaCha20Poly1305::new(Key::from_slice(key));
        let aad = wrap_aad(&header, i as u32);
        let ct = aead
            .encrypt(Nonce::from_slice(&n), Payload { msg: &policy::secret_to_bytes(share), aad: &aad })
            .expect("in-memory encryption cannot fail");
        let mut blob = n.to_vec();
        blob.extend_from_slice(&ct);
        wrapped_shares.push((i as u32, blob));
    }

    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let aad = payload_aad(&header, &wrapped_shares, &nonce);
    let mut sealed = ChaCha20Poly1305::new(Key::from_slice(&dek))
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: payload, aad: &aad })
        .expect("in-memory encryption cannot fail");
    let tag: [u8; TAG_LEN] = sealed.split_off(sealed.len() - TAG_LEN).try_into().unwrap();
    Ok(DabeCiphertext { policy: policy.clone(), epoch, wrapped_shares, nonce, ciphertext: sealed, tag })
}

/// Opens `ct` with `keyring`.
pub fn dabe_decrypt(ct: &DabeCiphertext, keyring: &UserKeyring) -> Result<Vec<u8>, DabeError> {
    if keyring.epoch != ct.epoch {
        return Err(DabeError::EpochMismatch { keyring: keyring.epoch, ciphertext: ct.epoch });
    }
    if ct.policy.validate().is_err() {
        return Err(DabeError::AuthenticationFailure);
    }
    if !policy_satisfied(&ct.policy, &keyring.attributes()) {
        return Err(DabeError::PolicyNotSatisfied);
    }
    let leaves = ct.policy.leaves();
    let well_formed = ct.wrapped_shares.len() == leaves.len()
        && ct.wrapped_shares.iter().enumerate().all(|(i, (idx, b))| *idx as usize == i && b.len() == WRAP_LEN);
    if !well_formed {
        return Err(DabeError::AuthenticationFailure);
    }

    let header = header_bytes(&ct.policy, ct.epoch);
    let mut shares = Vec::with_capacity(leaves.len());
    for (leaf, (idx, blob)) in leaves.iter().zip(&ct.wrapped_shares) {
        let Some(key) = keyring.key(leaf) else {
            shares.push(None);
            continue;
        };
        let aead = ChaCha20Poly1305::new(Key::from_slice(key));
        let aad = wrap_aad(&header, *idx);
        let plain = aead
            .decrypt(Nonce::from_slice(&blob[..NONCE_LEN]), Payload { msg: &blob[NONCE_LEN..], aad: &aad })
            .map_err(|_| DabeError::AuthenticationFailure)?;
        let bytes: [u8; 32] = plain.try_into().map_err(|_| DabeError::AuthenticationFailure)?;
        shares.push(Some(policy::secret_from_bytes(&bytes)));
    }
    let secret = policy::recover(&ct.policy, &shares).ok_or(DabeError::PolicyNotSatisfied)?;
    let dek = policy::secret_to_bytes(&secret);

    let aad = payload_aad(&header, &ct.wrapped_shares, &ct.nonce);
    let mut sealed = ct.ciphertext.clone();
    sealed.extend_from_slice(&ct.tag);
    ChaCha20Poly1305::new(Key::from_slice(&dek))
        .decrypt(Nonce::from_slice(&ct.nonce), Payload { msg: &sealed, aad: &aad })
        .map_err(|_| DabeError::AuthenticationFailure)
}

impl DabeCiphertext {
    pub fn encode(&self, w: &mut Writer) {
        self.policy.encode(w);
        w.u64(self.epoch).u32(self.wrapped_shares.len() as u32);
        for (i, b) in &self.wrapped_shares {
            w.u32(*i).bytes(b);
        }
        w.raw(&self.nonce).bytes(&self.ciphertext).raw(&self.tag);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let policy = AccessPolicy::decode(r)?;
        let epoch = r.u64()?;
        let n = r.count(8)?;
        let wrapped_shares = (0..n).map(|_| Ok((r.u32()?, r.bytes()?.to_vec()))).collect::<Result<_, DecodeError>>()?;
        Ok(Self {
            policy,
            epoch,
            wrapped_shares,
            nonce: r.array()?,
            ciphertext: r.bytes()?.to_vec(),
            tag: r.array()?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        let ct = Self::decode(&mut r)?;
        r.finish()?;
        Ok(ct)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn seed(b: u8) -> [u8; 32] {
        [b; 32]
    }

    fn directory() -> AuthorityDirectory {
        let mut d = AuthorityDirectory::new();
        d.setup_authority("auth-fog", &["fog", "region-1", "region-2"], &seed(0)).unwrap();
        d.setup_authority("auth-iot", &["iot"], &seed(1)).unwrap();
        d
    }

    fn keyring(d: &AuthorityDirectory, names: &[&str], epoch: u64) -> UserKeyring {
        let mut k = UserKeyring::empty("u", epoch);
        for a in d.authorities() {
            let mine: Vec<&str> = names.iter().copied().filter(|n| a.attribute(n).is_some()).collect();
            k = k.merge(a.keygen_user("u", &mine, epoch).unwrap()).unwrap();
        }
        k
    }

    #[test]
    fn setup_is_deterministic() {
        let a = authority_setup("auth-fog", &["fog", "region-1"], &seed(0)).unwrap();
        let b = authority_setup("auth-fog", &["fog", "region-1"], &seed(0)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = authority_setup("auth-fog", &["fog", "region-1"], &seed(9)).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn overlapping_universe_conflicts() {
        let mut d = directory();
        let err = d.setup_authority("auth-other", &["fog"], &seed(2)).unwrap_err();
        assert_eq!(err, DabeError::UniverseConflict { attribute: "fog".into(), owner: "auth-fog".into() });
        assert!(matches!(d.setup_authority("auth-iot", &["x"], &seed(2)), Err(DabeError::DuplicateAuthority(_))));
        assert_eq!(authority_setup("a", &[], &seed(0)).unwrap_err(), DabeError::EmptyUniverse);
    }

    #[test]
    fn keygen_rules() {
        let d = directory();
        let fog = d.authority("auth-fog").unwrap();
        let k1 = fog.keygen_user("fog-1", &["fog", "region-1"], 1).unwrap();
        let k1b = fog.keygen_user("someone-else", &["fog", "region-1"], 1).unwrap();
        let k2 = fog.keygen_user("fog-1", &["fog", "region-1"], 2).unwrap();
        for a in k1.attributes() {
            assert_eq!(k1.key(a), k1b.key(a), "keys are not bound to gid");
            assert_ne!(k1.key(a), k2.key(a), "epochs separate keys");
        }
        assert!(fog.keygen_user("x", &[], 1).unwrap().is_empty());
        assert_eq!(fog.keygen_user("x", &["iot"], 1).unwrap_err(), DabeError::ForeignAttribute("iot".into()));
    }

    #[test]
    fn keyring_json_round_trip() {
        let d = directory();
        let k = keyring(&d, &["fog", "iot"], 3);
        let json = k.to_json();
        assert!(json.contains("\"key_hex\""));
        assert_eq!(UserKeyring::from_json(&json).unwrap(), k);
    }

    #[test]
    fn empty_payload_round_trip_and_fresh_randomness() {
        let d = directory();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let p = d.parse_policy("fog").unwrap();
        let k = keyring(&d, &["fog"], 1);
        let ct = dabe_encrypt(b"", &p, &d, 1, &mut rng).unwrap();
        assert_eq!(dabe_decrypt(&ct, &k).unwrap(), b"");
        let a = dabe_encrypt(b"w", &p, &d, 1, &mut rng).unwrap();
        let b = dabe_encrypt(b"w", &p, &d, 1, &mut rng).unwrap();
        assert_ne!(a, b);
        assert_eq!(dabe_decrypt(&a, &k).unwrap(), b"w");
        assert_eq!(dabe_decrypt(&b, &k).unwrap(), b"w");
    }

    #[test]
    fn decrypt_errors() {
        let d = directory();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let p = d.parse_policy("fog AND region-1").unwrap();
        let ct = dabe_encrypt(b"secret", &p, &d, 1, &mut rng).unwrap();
        assert_eq!(dabe_decrypt(&ct, &keyring(&d, &["fog"], 1)), Err(DabeError::PolicyNotSatisfied));
        assert_eq!(
            dabe_decrypt(&ct, &keyring(&d, &["fog", "region-1"], 2)),
            Err(DabeError::EpochMismatch { keyring: 2, ciphertext: 1 })
        );
        let mut bad = ct.clone();
        bad.ciphertext[0] ^= 1;
        assert_eq!(dabe_decrypt(&bad, &keyring(&d, &["fog", "region-1"], 1)), Err(DabeError::AuthenticationFailure));
        let ghost = Attribute::new("auth-x", "ghost").unwrap();
        assert_eq!(
            dabe_encrypt(b"", &AccessPolicy::leaf(&ghost), &d, 1, &mut rng),
            Err(DabeError::UnknownAttribute("ghost".into()))
        );
    }

    #[test]
    fn every_single_byte_mutation_fails_closed() {
        let d = directory();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let p = d.parse_policy("iot OR (fog AND 1 OF (region-1, region-2))").unwrap();
        let ct = dabe_encrypt(b"model weights", &p, &d, 4, &mut rng).unwrap();
        let k = keyring(&d, &["fog", "region-1", "region-2", "iot"], 4);
        let bytes = ct.to_bytes();
        for i in 0..bytes.len() {
            let mut m = bytes.clone();
            m[i] ^= 0x20;
            if let Ok(mct) = DabeCiphertext::from_bytes(&m) {
                assert!(dabe_decrypt(&mct, &k).is_err(), "byte {i} mutation decrypted");
            }
        }
    }

    #[test]
    fn wrapped_share_and_payload_tampering_is_authentication_failure() {
        let d = directory();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let p = d.parse_policy("iot OR fog").unwrap();
        let ct = dabe_encrypt(b"abc", &p, &d, 1, &mut rng).unwrap();
        let k = keyring(&d, &["fog"], 1);
        // Tampering the share for a leaf the holder does not use still fails.
        for (leaf, byte) in [(0usize, 5usize), (1, 20), (0, 59)] {
            let mut bad = ct.clone();
            bad.wrapped_shares[leaf].1[byte] ^= 0x80;
            assert_eq!(dabe_decrypt(&bad, &k), Err(DabeError::AuthenticationFailure));
        }
        let mut bad = ct.clone();
        bad.tag[15] ^= 1;
        assert_eq!(dabe_decrypt(&bad, &k), Err(DabeError::AuthenticationFailure));
        let mut bad = ct;
        bad.nonce[0] ^= 1;
        assert_eq!(dabe_decrypt(&bad, &k), Err(DabeError::AuthenticationFailure));
    }
}
