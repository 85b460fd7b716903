//! Paillier additively homomorphic encryption.
//!
//! `Enc(m) = (1 + m·n) · r^n mod n²` with generator `g = n + 1`. Ciphertext
//! multiplication adds plaintexts mod n; exponentiation by `k` scales them.

mod codec;
pub mod prime;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use codec::{to_fixed, Encoded, FixedPointCodec, CLIP, SCALE_BITS};

use crate::par::{self, Exec};
use crate::wire::{DecodeError, Reader, Writer};

/// Modulus sizes accepted by [`he_keygen`]: 256 is the fast test profile.
pub const SUPPORTED_BITS: [u64; 3] = [256, 1024, 2048];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("plaintext is outside [0, n)")]
    PlaintextOutOfRange,
    #[error("ciphertext was produced under a different key")]
    KeyMismatch,
    #[error("ciphertext value is not a unit mod n^2")]
    MalformedCiphertext,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HePublicKey {
    n: BigUint,
    n_squared: BigUint,
    fingerprint: [u8; 16],
}

impl HePublicKey {
    pub fn from_modulus(n: BigUint) -> Self {
        let fingerprint = Sha256::digest(n.to_bytes_be())[..16].try_into().unwrap();
        Self { n_squared: &n * &n, n, fingerprint }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn fingerprint(&self) -> [u8; 16] {
        self.fingerprint
    }

    fn check(&self, ct: &HeCiphertext) -> Result<(), HeError> {
        if ct.fingerprint != self.fingerprint {
            return Err(HeError::KeyMismatch);
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct HePrivateKey {
    p: BigUint,
    q: BigUint,
    lambda: BigUint,
    mu: BigUint,
}

impl std::fmt::Debug for HePrivateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("HePrivateKey(..)")
    }
}

impl HePrivateKey {
    /// The prime factors of n.
    pub fn factors(&self) -> (&BigUint, &BigUint) {
        (&self.p, &self.q)
    }
}

#[derive(Debug, Clone)]
pub struct HeKeyPair {
    pub public: HePublicKey,
    pub private: HePrivateKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "CiphertextJson", try_from = "CiphertextJson")]
pub struct HeCiphertext {
    pub value: BigUint,
    pub fingerprint: [u8; 16],
}

#[derive(Serialize, Deserialize)]
struct CiphertextJson {
    value: String,
    fingerprint: String,
}

impl From<HeCiphertext> for CiphertextJson {
    fn from(c: HeCiphertext) -> Self {
        Self { value: hex::encode(c.value.to_bytes_be()), fingerprint: hex::encode(c.fingerprint) }
    }
}

impl TryFrom<CiphertextJson> for HeCiphertext {
    type Error = String;
    fn try_from(j: CiphertextJson) -> Result<Self, String> {
        let value = BigUint::from_bytes_be(&hex::decode(&j.value).map_err(|e| e.to_string())?);
        let fingerprint = hex::decode(&j.fingerprint)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| "fingerprint must be 16 hex bytes".to_string())?;
        Ok(Self { value, fingerprint })
    }
}

impl HeCiphertext {
    pub fn encode(&self, w: &mut Writer) {
        w.bytes(&self.value.to_bytes_be()).raw(&self.fingerprint);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self { value: BigUint::from_bytes_be(r.bytes()?), fingerprint: r.array()? })
    }
}

/// Generates a keypair with an n of exactly `bits` bits.
pub fn he_keygen(bits: u64, rng: &mut impl RngCore) -> Result<HeKeyPair, HeError> {
    if !SUPPORTED_BITS.contains(&bits) {
        return Err(HeError::InvalidParameter(format!("unsupported modulus size {bits}; use one of {SUPPORTED_BITS:?}")));
    }
    loop {
        let p = prime::gen_prime(bits / 2, rng);
        let q = prime::gen_prime(bits / 2, rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        if !n.gcd(&phi).is_one() {
            continue;
        }
        let lambda = prime::lcm(&(&p - 1u32), &(&q - 1u32));
        // With g = n + 1, L(g^λ mod n²) = λ mod n, so μ = λ⁻¹ mod n.
        let Some(mu) = mod_inverse(&(&lambda % &n), &n) else { continue };
        debug_assert_eq!(n.bits(), bits);
        return Ok(HeKeyPair { public: HePublicKey::from_modulus(n), private: HePrivateKey { p, q, lambda, mu } });
    }
}

fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    use num_bigint::BigInt;
    let e = BigInt::from(a.clone()).extended_gcd(&BigInt::from(m.clone()));
    if !e.gcd.is_one() {
        return None;
    }
    let m = BigInt::from(m.clone());
    ((e.x % &m + &m) % &m).to_biguint()
}

pub fn he_encrypt(pk: &HePublicKey, m: &BigUint, rng: &mut impl RngCore) -> Result<HeCiphertext, HeError> {
    if m >= &pk.n {
        return Err(HeError::PlaintextOutOfRange);
    }
    let r = loop {
        let r = rng.gen_biguint_range(&BigUint::one(), &pk.n);
        if r.gcd(&pk.n).is_one() {
            break r;
        }
    };
    Ok(encrypt_with(pk, m, &r))
}

fn encrypt_with(pk: &HePublicKey, m: &BigUint, r: &BigUint) -> HeCiphertext {
    let gm = (BigUint::one() + m * &pk.n) % &pk.n_squared;
    let value = gm * r.modpow(&pk.n, &pk.n_squared) % &pk.n_squared;
    HeCiphertext { value, fingerprint: pk.fingerprint }
}

pub fn he_decrypt(keys: &HeKeyPair, ct: &HeCiphertext) -> Result<BigUint, HeError> {
    let pk = &keys.public;
    pk.check(ct)?;
    if ct.value.is_zero() || ct.value >= pk.n_squared {
        return Err(HeError::MalformedCiphertext);
    }
    let u = ct.value.modpow(&keys.private.lambda, &pk.n_squared);
    let l = (u - 1u32) / &pk.n;
    Ok(l * &keys.private.mu % &pk.n)
}

/// Homomorphic addition: decrypts to `(a + b) mod n`.
pub fn he_add(pk: &HePublicKey, a: &HeCiphertext, b: &HeCiphertext) -> Result<HeCiphertext, HeError> {
    pk.check(a)?;
    pk.check(b)?;
    Ok(HeCiphertext { value: &a.value * &b.value % &pk.n_squared, fingerprint: pk.fingerprint })
}

/// Homomorphic scaling: decrypts to `(k · a) mod n`.
pub fn he_scalar_mul(pk: &HePublicKey, a: &HeCiphertext, k: &BigUint) -> Result<HeCiphertext, HeError> {
    pk.check(a)?;
    if k >= &pk.n {
        return Err(HeError::PlaintextOutOfRange);
    }
    Ok(HeCiphertext { value: a.value.modpow(k, &pk.n_squared), fingerprint: pk.fingerprint })
}

/// Encrypts a vector. Randomness is drawn from `rng` up front so the result is
/// the same whichever execution mode runs the exponentiations.
pub fn encrypt_vector(
    pk: &HePublicKey,
    ms: &[BigUint],
    rng: &mut impl RngCore,
    exec: Exec,
) -> Result<Vec<HeCiphertext>, HeError> {
    if ms.iter().any(|m| m >= &pk.n) {
        return Err(HeError::PlaintextOutOfRange);
    }
    let seeds: Vec<(BigUint, [u8; 32])> = ms
        .iter()
        .map(|m| {
            let mut s = [0u8; 32];
            rng.fill_bytes(&mut s);
            (m.clone(), s)
        })
        .collect();
    let cts = par::map(exec, &seeds, |(m, s)| {
        let mut local = rand_chacha::ChaCha20Rng::from_seed(*s);
        he_encrypt(pk, m, &mut local)
    });
    cts.into_iter().collect()
}

pub fn decrypt_vector(keys: &HeKeyPair, cts: &[HeCiphertext], exec: Exec) -> Result<Vec<BigUint>, HeError> {
    par::map(exec, cts, |c| he_decrypt(keys, c)).into_iter().collect()
}

/// Coordinate-wise homomorphic sum of equally long ciphertext vectors.
pub fn add_vectors(pk: &HePublicKey, a: &[HeCiphertext], b: &[HeCiphertext]) -> Result<Vec<HeCiphertext>, HeError> {
    if a.len() != b.len() {
        return Err(HeError::InvalidParameter("ciphertext vectors differ in length".into()));
    }
    a.iter().zip(b).map(|(x, y)| he_add(pk, x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha20Rng;

    fn keys(seed: u64) -> HeKeyPair {
        he_keygen(256, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn keygen_deterministic_and_sized() {
        let a = keys(1);
        let b = keys(1);
        assert_eq!(a.public, b.public);
        assert_eq!(a.public.n().bits(), 256);
        let (p, q) = a.private.factors();
        assert_eq!(p * q, *a.public.n());
        assert!(matches!(he_keygen(100, &mut ChaCha20Rng::seed_from_u64(0)), Err(HeError::InvalidParameter(_))));
    }

    #[test]
    fn boundary_round_trips() {
        let k = keys(2);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let n = k.public.n().clone();
        for m in [BigUint::zero(), BigUint::one(), &n - 1u32] {
            let c = he_encrypt(&k.public, &m, &mut rng).unwrap();
            assert_eq!(he_decrypt(&k, &c).unwrap(), m);
        }
        assert_eq!(he_encrypt(&k.public, &n, &mut rng), Err(HeError::PlaintextOutOfRange));
    }

    #[test]
    fn small_homomorphisms() {
        let k = keys(4);
        let pk = &k.public;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let enc = |m: u32, rng: &mut ChaCha20Rng| he_encrypt(pk, &BigUint::from(m), rng).unwrap();
        let zero = he_add(pk, &enc(0, &mut rng), &enc(0, &mut rng)).unwrap();
        assert_eq!(he_decrypt(&k, &zero).unwrap(), BigUint::zero());
        let eight = he_add(pk, &enc(3, &mut rng), &enc(5, &mut rng)).unwrap();
        assert_eq!(he_decrypt(&k, &eight).unwrap(), BigUint::from(8u32));
        let c2 = enc(2, &mut rng);
        assert_eq!(he_decrypt(&k, &he_scalar_mul(pk, &c2, &BigUint::from(3u32)).unwrap()).unwrap(), BigUint::from(6u32));
        assert_eq!(he_decrypt(&k, &he_scalar_mul(pk, &c2, &BigUint::one()).unwrap()).unwrap(), BigUint::from(2u32));
        assert_eq!(he_decrypt(&k, &he_scalar_mul(pk, &c2, &BigUint::zero()).unwrap()).unwrap(), BigUint::zero());
    }

    #[test]
    fn fold_of_twenty() {
        let k = keys(6);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let ms: Vec<BigUint> = (0..20).map(|_| rng.gen_biguint_below(k.public.n())).collect();
        let cts: Vec<_> = ms.iter().map(|m| he_encrypt(&k.public, m, &mut rng).unwrap()).collect();
        let sum = cts[1..].iter().fold(cts[0].clone(), |acc, c| he_add(&k.public, &acc, c).unwrap());
        let expected = ms.iter().fold(BigUint::zero(), |a, m| a + m) % k.public.n();
        assert_eq!(he_decrypt(&k, &sum).unwrap(), expected);
    }

    #[test]
    fn key_mismatch() {
        let a = keys(8);
        let b = keys(9);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let ca = he_encrypt(&a.public, &BigUint::one(), &mut rng).unwrap();
        let cb = he_encrypt(&b.public, &BigUint::one(), &mut rng).unwrap();
        assert_eq!(he_add(&a.public, &ca, &cb), Err(HeError::KeyMismatch));
        assert_eq!(he_decrypt(&a, &cb), Err(HeError::KeyMismatch));
        assert_eq!(he_scalar_mul(&a.public, &cb, &BigUint::one()), Err(HeError::KeyMismatch));
    }

    #[test]
    fn encryption_is_probabilistic() {
        let k = keys(10);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let m = BigUint::from(42u32);
        let a = he_encrypt(&k.public, &m, &mut rng).unwrap();
        let b = he_encrypt(&k.public, &m, &mut rng).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn vector_modes_agree() {
        let k = keys(12);
        let ms: Vec<BigUint> = (0..16u32).map(BigUint::from).collect();
        let a = encrypt_vector(&k.public, &ms, &mut ChaCha20Rng::seed_from_u64(1), Exec::Sequential).unwrap();
        let b = encrypt_vector(&k.public, &ms, &mut ChaCha20Rng::seed_from_u64(1), Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(decrypt_vector(&k, &a, Exec::Parallel).unwrap(), ms);
    }

    #[test]
    fn json_is_hex() {
        let k = keys(13);
        let c = he_encrypt(&k.public, &BigUint::from(5u32), &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains(&hex::encode(c.fingerprint)));
        assert_eq!(serde_json::from_str::<HeCiphertext>(&s).unwrap(), c);
    }
}
