//! n-of-n additive secret sharing over a prime field, and a simulated
//! share-exchange protocol that sums private vectors.
//!
//! Only additions are needed, so any prime below 2^127 works as a modulus. The
//! production field is the Mersenne prime 2^127 - 1; [`SmallField`] (p = 257)
//! exists so share distributions can be checked statistically.

use std::fmt;
use std::ops::{Add, Neg, Sub};

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wire::Writer;

pub const MERSENNE_127: u128 = (1u128 << 127) - 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SmpcError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("expected {expected} shares, got {got}")]
    IncompleteShares { expected: usize, got: usize },
    #[error("input vectors differ in dimension")]
    DimensionMismatch,
}

/// Element of Z_P.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Fp<const P: u128>(u128);

pub type FieldElement = Fp<MERSENNE_127>;
pub type SmallField = Fp<257>;

impl<const P: u128> Fp<P> {
    pub const ZERO: Self = Fp(0);
    pub const MODULUS: u128 = P;

    pub fn new(v: u128) -> Self {
        Fp(v % P)
    }

    pub fn value(self) -> u128 {
        self.0
    }

    /// Embeds a signed integer (negatives wrap to `P - |v|`).
    pub fn from_i128(v: i128) -> Self {
        let m = v.rem_euclid(P as i128);
        Fp(m as u128)
    }

    /// Reads the element back as a signed integer in `(-P/2, P/2]`.
    pub fn to_i128(self) -> i128 {
        if self.0 > P / 2 {
            -((P - self.0) as i128)
        } else {
            self.0 as i128
        }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Fp(rng.gen_range(0..P))
    }

    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_be_bytes()
    }
}

impl<const P: u128> fmt::Debug for Fp<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl<const P: u128> Add for Fp<P> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        // Both operands are below 2^127, so the sum fits in u128.
        let s = self.0 + rhs.0;
        Fp(if s >= P { s - P } else { s })
    }
}

impl<const P: u128> Neg for Fp<P> {
    type Output = Self;
    fn neg(self) -> Self {
        Fp(if self.0 == 0 { 0 } else { P - self.0 })
    }
}

impl<const P: u128> Sub for Fp<P> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl<const P: u128> std::iter::Sum for Fp<P> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Fp(0), |a, b| a + b)
    }
}

/// Shares of one scalar secret, one per participant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareSet<const P: u128> {
    pub shares: Vec<(usize, Fp<P>)>,
    /// Participant count the secret was split for.
    pub participants: usize,
    /// 1 for scalar secrets.
    pub secret_dim: usize,
}

impl<const P: u128> ShareSet<P> {
    /// Share-wise sum; reconstructs to the sum of both secrets.
    pub fn add(&self, other: &Self) -> Result<Self, SmpcError> {
        if self.participants != other.participants || self.shares.len() != other.shares.len() {
            return Err(SmpcError::InvalidParameter("share sets of different shape".into()));
        }
        let mut a = self.shares.clone();
        let mut b = other.shares.clone();
        a.sort_by_key(|s| s.0);
        b.sort_by_key(|s| s.0);
        if a.iter().zip(&b).any(|(x, y)| x.0 != y.0) {
            return Err(SmpcError::InvalidParameter("participant ids differ".into()));
        }
        Ok(Self {
            shares: a.iter().zip(&b).map(|(x, y)| (x.0, x.1 + y.1)).collect(),
            participants: self.participants,
            secret_dim: self.secret_dim,
        })
    }
}

/// Splits `secret` into `n` shares: `n - 1` uniform, the last closing the sum.
pub fn share_secret<const P: u128>(secret: Fp<P>, n: usize, rng: &mut impl Rng) -> Result<ShareSet<P>, SmpcError> {
    if n < 2 {
        return Err(SmpcError::InvalidParameter(format!("need at least 2 participants, got {n}")));
    }
    let mut shares: Vec<(usize, Fp<P>)> = (0..n - 1).map(|i| (i, Fp::random(rng))).collect();
    let last = secret - shares.iter().map(|s| s.1).sum::<Fp<P>>();
    shares.push((n - 1, last));
    Ok(ShareSet { shares, participants: n, secret_dim: 1 })
}

pub fn reconstruct_secret<const P: u128>(set: &ShareSet<P>) -> Result<Fp<P>, SmpcError> {
    let mut ids: Vec<usize> = set.shares.iter().map(|s| s.0).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != set.participants || set.shares.len() != set.participants {
        return Err(SmpcError::IncompleteShares { expected: set.participants, got: ids.len() });
    }
    Ok(set.shares.iter().map(|s| s.1).sum())
}

/// What an observer of the exchange sees: shares in transit and the partial
/// sums each participant publishes. Raw inputs never appear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript<const P: u128> {
    /// `(from, to, share vector)`; self-shares are kept locally and not listed.
    pub messages: Vec<(usize, usize, Vec<Fp<P>>)>,
    /// `(participant, sum of shares it holds)`.
    pub partial_sums: Vec<(usize, Vec<Fp<P>>)>,
}

impl<const P: u128> Transcript<P> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(b"smpc-transcript-v1").u32(self.messages.len() as u32);
        for (from, to, v) in &self.messages {
            w.u32(*from as u32).u32(*to as u32).u32(v.len() as u32);
            v.iter().for_each(|x| {
                w.raw(&x.to_bytes());
            });
        }
        w.u32(self.partial_sums.len() as u32);
        for (who, v) in &self.partial_sums {
            w.u32(*who as u32).u32(v.len() as u32);
            v.iter().for_each(|x| {
                w.raw(&x.to_bytes());
            });
        }
        w.finish()
    }

    /// SHA-256 of the canonical transcript encoding; this is what gets logged.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

/// Result of [`secure_vector_sum`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecureSum<const P: u128> {
    pub sum: Vec<Fp<P>>,
    /// Participant `i`'s published partial sum; these add up to `sum`.
    pub partials: Vec<Vec<Fp<P>>>,
    pub transcript: Transcript<P>,
}

/// Simulates the exchange: every participant splits its vector coordinate-wise
/// into `n` shares and sends share `j` to participant `j`; each participant sums
/// what it holds and publishes the partial sum.
pub fn secure_vector_sum<const P: u128>(
    inputs: &[Vec<Fp<P>>],
    n: usize,
    rng: &mut impl Rng,
) -> Result<SecureSum<P>, SmpcError> {
    if inputs.len() != n {
        return Err(SmpcError::InvalidParameter(format!("{} inputs for {n} participants", inputs.len())));
    }
    if n < 2 {
        return Err(SmpcError::InvalidParameter(format!("need at least 2 participants, got {n}")));
    }
    let d = inputs[0].len();
    if inputs.iter().any(|v| v.len() != d) {
        return Err(SmpcError::DimensionMismatch);
    }

    // held[j][k] = sum of coordinate-k shares that participant j received.
    let mut held = vec![vec![Fp::<P>::ZERO; d]; n];
    let mut messages = Vec::with_capacity(n * (n - 1));
    for (i, input) in inputs.iter().enumerate() {
        let mut outgoing = vec![Vec::with_capacity(d); n];
        for &x in input {
            let set = share_secret(x, n, rng)?;
            for (j, s) in set.shares {
                outgoing[j].push(s);
            }
        }
        for (j, v) in outgoing.into_iter().enumerate() {
            for (h, s) in held[j].iter_mut().zip(&v) {
                *h = *h + *s;
            }
            if i != j {
                messages.push((i, j, v));
            }
        }
    }
    let sum = (0..d).map(|k| held.iter().map(|h| h[k]).sum()).collect();
    let transcript = Transcript { messages, partial_sums: held.iter().cloned().enumerate().collect() };
    Ok(SecureSum { sum, partials: held, transcript })
}
