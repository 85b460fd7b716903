//! Attributes, monotone access policies and their linear secret-sharing scheme.

use std::collections::BTreeSet;
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::gf128::Gf128;
use super::DabeError;
use crate::wire::{DecodeError, Reader, Writer};

pub const MAX_POLICY_DEPTH: usize = 16;

/// An attribute governed by exactly one authority.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Attribute {
    pub authority_id: String,
    pub name: String,
}

const RESERVED: [&str; 3] = ["AND", "OR", "OF"];

impl Attribute {
    pub fn new(authority_id: &str, name: &str) -> Result<Self, DabeError> {
        validate_attribute_name(name)?;
        if authority_id.is_empty() {
            return Err(DabeError::InvalidAttribute("empty authority id".into()));
        }
        Ok(Self { authority_id: authority_id.to_string(), name: name.to_string() })
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.str(&self.authority_id).str(&self.name);
    }
}

pub(crate) fn validate_attribute_name(name: &str) -> Result<(), DabeError> {
    let ok = !name.is_empty()
        && name.is_ascii()
        && !name.chars().any(|c| c.is_ascii_whitespace() || c.is_ascii_control() || "(),".contains(c))
        && !RESERVED.contains(&name)
        && !name.chars().all(|c| c.is_ascii_digit());
    if ok {
        Ok(())
    } else {
        Err(DabeError::InvalidAttribute(name.to_string()))
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Monotone boolean access structure over attributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessPolicy {
    Leaf(Attribute),
    And(Vec<AccessPolicy>),
    Or(Vec<AccessPolicy>),
    Threshold(usize, Vec<AccessPolicy>),
}

impl AccessPolicy {
    pub fn leaf(attr: &Attribute) -> Self {
        AccessPolicy::Leaf(attr.clone())
    }

    pub fn validate(&self) -> Result<(), DabeError> {
        fn walk(p: &AccessPolicy, depth: usize) -> Result<(), DabeError> {
            if depth > MAX_POLICY_DEPTH {
                return Err(DabeError::InvalidPolicy(format!("depth exceeds {MAX_POLICY_DEPTH}")));
            }
            match p {
                AccessPolicy::Leaf(a) => validate_attribute_name(&a.name),
                AccessPolicy::And(cs) | AccessPolicy::Or(cs) if cs.is_empty() => {
                    Err(DabeError::InvalidPolicy("gate without children".into()))
                }
                AccessPolicy::Threshold(k, cs) if *k == 0 || *k > cs.len() => Err(DabeError::InvalidPolicy(
                    format!("threshold {k} outside 1..={}", cs.len()),
                )),
                AccessPolicy::And(cs) | AccessPolicy::Or(cs) | AccessPolicy::Threshold(_, cs) => {
                    cs.iter().try_for_each(|c| walk(c, depth + 1))
                }
            }
        }
        walk(self, 1)
    }

    pub fn depth(&self) -> usize {
        match self {
            AccessPolicy::Leaf(_) => 1,
            AccessPolicy::And(cs) | AccessPolicy::Or(cs) | AccessPolicy::Threshold(_, cs) => {
                1 + cs.iter().map(|c| c.depth()).max().unwrap_or(0)
            }
        }
    }

    /// Leaves in depth-first order; a leaf's position is its LSSS row index.
    pub fn leaves(&self) -> Vec<&Attribute> {
        let mut out = Vec::new();
        fn walk<'a>(p: &'a AccessPolicy, out: &mut Vec<&'a Attribute>) {
            match p {
                AccessPolicy::Leaf(a) => out.push(a),
                AccessPolicy::And(cs) | AccessPolicy::Or(cs) | AccessPolicy::Threshold(_, cs) => {
                    cs.iter().for_each(|c| walk(c, out))
                }
            }
        }
        walk(self, &mut out);
        out
    }

    pub fn attributes(&self) -> BTreeSet<&Attribute> {
        self.leaves().into_iter().collect()
    }

    /// Parses `fog AND (region-1 OR region-2)` or `2 OF (a, b, c)`.
    ///
    /// `AND` binds tighter than `OR`; attribute names are resolved by `resolve`.
    pub fn parse(text: &str, resolve: impl Fn(&str) -> Option<Attribute>) -> Result<Self, DabeError> {
        let tokens = tokenize(text)?;
        let mut p = Parser { tokens, pos: 0, resolve: &resolve };
        let policy = p.expr()?;
        if let Some((tok, at)) = p.tokens.get(p.pos) {
            return Err(DabeError::PolicyParse { offset: *at, message: format!("unexpected `{tok}`") });
        }
        policy.validate()?;
        Ok(policy)
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        match self {
            AccessPolicy::Leaf(a) => {
                w.u8(0);
                a.encode(w);
            }
            AccessPolicy::And(cs) => {
                w.u8(1).u32(cs.len() as u32);
                cs.iter().for_each(|c| c.encode(w));
            }
            AccessPolicy::Or(cs) => {
                w.u8(2).u32(cs.len() as u32);
                cs.iter().for_each(|c| c.encode(w));
            }
            AccessPolicy::Threshold(k, cs) => {
                w.u8(3).u32(*k as u32).u32(cs.len() as u32);
                cs.iter().for_each(|c| c.encode(w));
            }
        }
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        fn node(r: &mut Reader<'_>, depth: usize) -> Result<AccessPolicy, DecodeError> {
            if depth > MAX_POLICY_DEPTH {
                return Err(r.invalid("policy depth"));
            }
            let tag = r.u8()?;
            let children = |r: &mut Reader<'_>| -> Result<Vec<AccessPolicy>, DecodeError> {
                let n = r.count(9)?;
                (0..n).map(|_| node(r, depth + 1)).collect()
            };
            Ok(match tag {
                0 => AccessPolicy::Leaf(Attribute { authority_id: r.string()?, name: r.string()? }),
                1 => AccessPolicy::And(children(r)?),
                2 => AccessPolicy::Or(children(r)?),
                3 => {
                    let k = r.u32()? as usize;
                    AccessPolicy::Threshold(k, children(r)?)
                }
                _ => return Err(r.invalid("policy node tag")),
            })
        }
        node(r, 1)
    }
}

impl fmt::Display for AccessPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(c: &AccessPolicy, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            match c {
                AccessPolicy::Leaf(_) | AccessPolicy::Threshold(..) => write!(f, "{c}"),
                _ => write!(f, "({c})"),
            }
        }
        match self {
            AccessPolicy::Leaf(a) => write!(f, "{a}"),
            AccessPolicy::And(cs) | AccessPolicy::Or(cs) => {
                let op = if matches!(self, AccessPolicy::And(_)) { " AND " } else { " OR " };
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(op)?;
                    }
                    child(c, f)?;
                }
                Ok(())
            }
            AccessPolicy::Threshold(k, cs) => {
                write!(f, "{k} OF (")?;
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Recursive truth evaluation of `policy` over `attrs`.
pub fn policy_satisfied(policy: &AccessPolicy, attrs: &BTreeSet<&Attribute>) -> bool {
    match policy {
        AccessPolicy::Leaf(a) => attrs.contains(a),
        AccessPolicy::And(cs) => cs.iter().all(|c| policy_satisfied(c, attrs)),
        AccessPolicy::Or(cs) => cs.iter().any(|c| policy_satisfied(c, attrs)),
        AccessPolicy::Threshold(k, cs) => cs.iter().filter(|c| policy_satisfied(c, attrs)).count() >= *k,
    }
}

fn tokenize(text: &str) -> Result<Vec<(String, usize)>, DabeError> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || "(),".contains(c) {
            if !cur.is_empty() {
                out.push((std::mem::take(&mut cur), start));
            }
            if !c.is_whitespace() {
                out.push((c.to_string(), i));
            }
        } else {
            if cur.is_empty() {
                start = i;
            }
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push((cur, start));
    }
    if out.is_empty() {
        return Err(DabeError::PolicyParse { offset: 0, message: "empty policy".into() });
    }
    Ok(out)
}

struct Parser<'r> {
    tokens: Vec<(String, usize)>,
    pos: usize,
    resolve: &'r dyn Fn(&str) -> Option<Attribute>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).map(|(t, _)| t.as_str())
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map(|(_, o)| *o).unwrap_or_else(|| {
            self.tokens.last().map(|(t, o)| o + t.len()).unwrap_or(0)
        })
    }

    fn err(&self, message: impl Into<String>) -> DabeError {
        DabeError::PolicyParse { offset: self.offset(), message: message.into() }
    }

    fn expect(&mut self, tok: &str) -> Result<(), DabeError> {
        if self.peek() == Some(tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected `{tok}`")))
        }
    }

    fn expr(&mut self) -> Result<AccessPolicy, DabeError> {
        let mut terms = vec![self.term()?];
        while self.peek() == Some("OR") {
            self.pos += 1;
            terms.push(self.term()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { AccessPolicy::Or(terms) })
    }

    fn term(&mut self) -> Result<AccessPolicy, DabeError> {
        let mut factors = vec![self.factor()?];
        while self.peek() == Some("AND") {
            self.pos += 1;
            factors.push(self.factor()?);
        }
        Ok(if factors.len() == 1 { factors.pop().unwrap() } else { AccessPolicy::And(factors) })
    }

    fn factor(&mut self) -> Result<AccessPolicy, DabeError> {
        match self.peek() {
            None => Err(self.err("unexpected end of policy")),
            Some("(") => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(")")?;
                Ok(e)
            }
            Some(t) if t.chars().all(|c| c.is_ascii_digit()) => {
                let k: usize = t.parse().map_err(|_| self.err("threshold out of range"))?;
                self.pos += 1;
                self.expect("OF")?;
                self.expect("(")?;
                let mut cs = vec![self.expr()?];
                while self.peek() == Some(",") {
                    self.pos += 1;
                    cs.push(self.expr()?);
                }
                self.expect(")")?;
                Ok(AccessPolicy::Threshold(k, cs))
            }
            Some(t) if RESERVED.contains(&t) || t == ")" || t == "," => Err(self.err(format!("unexpected `{t}`"))),
            Some(t) => {
                let name = t.to_string();
                let attr = (self.resolve)(&name).ok_or_else(|| DabeError::UnknownAttribute(name.clone()))?;
                self.pos += 1;
                Ok(AccessPolicy::Leaf(attr))
            }
        }
    }
}

/// A data-encryption key as two GF(2^128) elements.
pub(crate) type Secret = [Gf128; 2];

pub(crate) fn secret_from_bytes(b: &[u8; 32]) -> Secret {
    [Gf128::from_bytes(b[..16].try_into().unwrap()), Gf128::from_bytes(b[16..].try_into().unwrap())]
}

pub(crate) fn secret_to_bytes(s: &Secret) -> [u8; 32] {
    let mut out = [0u8; 32];
    out[..16].copy_from_slice(&s[0].to_bytes());
    out[16..].copy_from_slice(&s[1].to_bytes());
    out
}

fn random_secret(rng: &mut impl RngCore) -> Secret {
    let mut b = [0u8; 32];
    rng.fill_bytes(&mut b);
    secret_from_bytes(&b)
}

fn add(a: Secret, b: Secret) -> Secret {
    [a[0] + b[0], a[1] + b[1]]
}

fn scale(a: Secret, k: Gf128) -> Secret {
    [a[0] * k, a[1] * k]
}

/// Splits `secret` over the policy: AND gates split additively, OR gates
/// duplicate, THRESHOLD(k) gates use a degree k-1 Shamir polynomial with child
/// `i` evaluated at x = i + 1. Returns one share per leaf in depth-first order.
pub(crate) fn share(policy: &AccessPolicy, secret: Secret, rng: &mut impl RngCore) -> Vec<Secret> {
    let mut out = Vec::new();
    share_into(policy, secret, rng, &mut out);
    out
}

fn share_into(policy: &AccessPolicy, secret: Secret, rng: &mut impl RngCore, out: &mut Vec<Secret>) {
    match policy {
        AccessPolicy::Leaf(_) => out.push(secret),
        AccessPolicy::Or(cs) => cs.iter().for_each(|c| share_into(c, secret, rng, out)),
        AccessPolicy::And(cs) => {
            let mut acc = secret;
            let n = cs.len();
            for (i, c) in cs.iter().enumerate() {
                let s = if i + 1 == n {
                    acc
                } else {
                    let r = random_secret(rng);
                    acc = add(acc, r);
                    r
                };
                share_into(c, s, rng, out);
            }
        }
        AccessPolicy::Threshold(k, cs) => {
            let coeffs: Vec<Secret> =
                std::iter::once(secret).chain((1..*k).map(|_| random_secret(rng))).collect();
            for (i, c) in cs.iter().enumerate() {
                let x = Gf128(i as u128 + 1);
                // Horner evaluation.
                let y = coeffs.iter().rev().fold([Gf128::ZERO; 2], |acc, co| add(scale(acc, x), *co));
                share_into(c, y, rng, out);
            }
        }
    }
}

/// Rebuilds the secret from the leaf shares that are available, or `None` when
/// the available leaves do not satisfy the policy.
pub(crate) fn recover(policy: &AccessPolicy, shares: &[Option<Secret>]) -> Option<Secret> {
    let mut idx = 0;
    recover_at(policy, shares, &mut idx)
}

fn recover_at(policy: &AccessPolicy, shares: &[Option<Secret>], idx: &mut usize) -> Option<Secret> {
    match policy {
        AccessPolicy::Leaf(_) => {
            let s = shares.get(*idx).copied().flatten();
            *idx += 1;
            s
        }
        AccessPolicy::Or(cs) => {
            let rs: Vec<_> = cs.iter().map(|c| recover_at(c, shares, idx)).collect();
            rs.into_iter().flatten().next()
        }
        AccessPolicy::And(cs) => {
            let rs: Vec<_> = cs.iter().map(|c| recover_at(c, shares, idx)).collect();
            rs.into_iter().try_fold([Gf128::ZERO; 2], |acc, s| s.map(|s| add(acc, s)))
        }
        AccessPolicy::Threshold(k, cs) => {
            let points: Vec<(Gf128, Secret)> = cs
                .iter()
                .enumerate()
                .filter_map(|(i, c)| recover_at(c, shares, idx).map(|s| (Gf128(i as u128 + 1), s)))
                .collect::<Vec<_>>();
            if points.len() < *k {
                return None;
            }
            let points = &points[..*k];
            // Lagrange interpolation at zero; subtraction is addition in characteristic 2.
            let mut acc = [Gf128::ZERO; 2];
            for (i, (xi, yi)) in points.iter().enumerate() {
                let mut num = Gf128::ONE;
                let mut den = Gf128::ONE;
                for (j, (xj, _)) in points.iter().enumerate() {
                    if i != j {
                        num = num * *xj;
                        den = den * (*xj + *xi);
                    }
                }
                acc = add(acc, scale(*yi, num * den.inv()?));
            }
            Some(acc)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn attr(n: &str) -> Attribute {
        Attribute::new("auth", n).unwrap()
    }

    fn resolver(n: &str) -> Option<Attribute> {
        Attribute::new("auth", n).ok()
    }

    #[test]
    fn parse_precedence_and_threshold() {
        let p = AccessPolicy::parse("fog AND (region-1 OR region-2)", resolver).unwrap();
        assert_eq!(
            p,
            AccessPolicy::And(vec![
                AccessPolicy::leaf(&attr("fog")),
                AccessPolicy::Or(vec![AccessPolicy::leaf(&attr("region-1")), AccessPolicy::leaf(&attr("region-2"))]),
            ])
        );
        let t = AccessPolicy::parse("2 OF (a, b, c)", resolver).unwrap();
        assert!(matches!(t, AccessPolicy::Threshold(2, ref cs) if cs.len() == 3));
        let q = AccessPolicy::parse("a OR b AND c", resolver).unwrap();
        assert!(matches!(q, AccessPolicy::Or(ref cs) if matches!(cs[1], AccessPolicy::And(_))));
    }

    #[test]
    fn display_reparses_to_same_tree() {
        for text in ["fog AND (region-1 OR region-2)", "2 OF (a, b AND c, d OR e)", "x", "(a OR b) AND 1 OF (c)"] {
            let p = AccessPolicy::parse(text, resolver).unwrap();
            let again = AccessPolicy::parse(&p.to_string(), resolver).unwrap();
            assert_eq!(p, again, "{text} -> {p}");
        }
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(AccessPolicy::parse("", resolver), Err(DabeError::PolicyParse { .. })));
        assert!(matches!(AccessPolicy::parse("a AND", resolver), Err(DabeError::PolicyParse { .. })));
        assert!(matches!(AccessPolicy::parse("(a OR b", resolver), Err(DabeError::PolicyParse { .. })));
        assert!(matches!(AccessPolicy::parse("4 OF (a, b, c)", resolver), Err(DabeError::InvalidPolicy(_))));
        assert!(matches!(AccessPolicy::parse("0 OF (a)", resolver), Err(DabeError::InvalidPolicy(_))));
        assert!(matches!(AccessPolicy::parse("ghost", |_| None), Err(DabeError::UnknownAttribute(_))));
    }

    #[test]
    fn depth_limit() {
        let mut p = AccessPolicy::leaf(&attr("a"));
        for _ in 0..15 {
            p = AccessPolicy::Or(vec![p]);
        }
        assert_eq!(p.depth(), 16);
        p.validate().unwrap();
        assert!(AccessPolicy::Or(vec![p]).validate().is_err());
    }

    #[test]
    fn satisfied_examples() {
        let (a, b, c) = (attr("a"), attr("b"), attr("c"));
        let or = AccessPolicy::Or(vec![AccessPolicy::leaf(&a), AccessPolicy::leaf(&b)]);
        assert!(policy_satisfied(&or, &[&b].into_iter().collect()));
        let th = AccessPolicy::Threshold(2, vec![AccessPolicy::leaf(&a), AccessPolicy::leaf(&b), AccessPolicy::leaf(&c)]);
        assert!(!policy_satisfied(&th, &[&a].into_iter().collect()));
        assert!(policy_satisfied(&th, &[&a, &c].into_iter().collect()));
    }

    #[test]
    fn lsss_reconstructs_only_for_satisfying_leaf_sets() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let p = AccessPolicy::parse("2 OF (a, b AND c, d OR e)", resolver).unwrap();
        let secret = random_secret(&mut rng);
        let shares = share(&p, secret, &mut rng);
        let leaves = p.leaves();
        assert_eq!(shares.len(), leaves.len());
        for mask in 0u32..(1 << leaves.len()) {
            let avail: Vec<Option<Secret>> =
                (0..leaves.len()).map(|i| (mask >> i & 1 == 1).then_some(shares[i])).collect();
            let held: BTreeSet<&Attribute> =
                leaves.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, a)| *a).collect();
            let got = recover(&p, &avail);
            if policy_satisfied(&p, &held) {
                assert_eq!(got, Some(secret), "mask {mask:b}");
            } else {
                assert_eq!(got, None, "mask {mask:b}");
            }
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let p = AccessPolicy::parse("2 OF (a, b AND c, d OR e)", resolver).unwrap();
        let mut w = Writer::new();
        p.encode(&mut w);
        let bytes = w.finish();
        let mut r = Reader::new(&bytes);
        assert_eq!(AccessPolicy::decode(&mut r).unwrap(), p);
        r.finish().unwrap();
    }
}
