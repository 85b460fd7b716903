//! Statements and their prefix text form.

use std::collections::BTreeMap;
use std::fmt;

use super::BanError;

pub type Principal = String;
pub type Key = String;

/// Deepest statement a theory may contain.
pub const MAX_DEPTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Statement {
    Believes(Principal, Box<Statement>),
    Sees(Principal, Box<Statement>),
    Said(Principal, Box<Statement>),
    Controls(Principal, Box<Statement>),
    Fresh(Box<Statement>),
    /// Always built through [`Statement::shared_key`], which orders the pair.
    SharedKey(Key, Principal, Principal),
    Encrypted(Box<Statement>, Key),
    Conj(Box<Statement>, Box<Statement>),
    Atom(String),
}

impl Statement {
    pub fn believes(p: &str, s: Statement) -> Self {
        Statement::Believes(p.into(), Box::new(s))
    }

    pub fn sees(p: &str, s: Statement) -> Self {
        Statement::Sees(p.into(), Box::new(s))
    }

    pub fn said(p: &str, s: Statement) -> Self {
        Statement::Said(p.into(), Box::new(s))
    }

    pub fn controls(p: &str, s: Statement) -> Self {
        Statement::Controls(p.into(), Box::new(s))
    }

    pub fn fresh(s: Statement) -> Self {
        Statement::Fresh(Box::new(s))
    }

    pub fn shared_key(k: &str, p: &str, q: &str) -> Self {
        let (a, b) = if p <= q { (p, q) } else { (q, p) };
        Statement::SharedKey(k.into(), a.into(), b.into())
    }

    pub fn encrypted(s: Statement, k: &str) -> Self {
        Statement::Encrypted(Box::new(s), k.into())
    }

    pub fn conj(s: Statement, t: Statement) -> Self {
        Statement::Conj(Box::new(s), Box::new(t))
    }

    pub fn atom(a: &str) -> Self {
        Statement::Atom(a.into())
    }

    pub fn depth(&self) -> usize {
        match self {
            Statement::Believes(_, s)
            | Statement::Sees(_, s)
            | Statement::Said(_, s)
            | Statement::Controls(_, s)
            | Statement::Fresh(s)
            | Statement::Encrypted(s, _) => 1 + s.depth(),
            Statement::Conj(s, t) => 1 + s.depth().max(t.depth()),
            Statement::SharedKey(..) | Statement::Atom(_) => 1,
        }
    }

    /// Principals named anywhere in the statement.
    pub fn principals(&self, out: &mut Vec<Principal>) {
        match self {
            Statement::Believes(p, s) | Statement::Sees(p, s) | Statement::Said(p, s) | Statement::Controls(p, s) => {
                out.push(p.clone());
                s.principals(out);
            }
            Statement::Fresh(s) | Statement::Encrypted(s, _) => s.principals(out),
            Statement::Conj(s, t) => {
                s.principals(out);
                t.principals(out);
            }
            Statement::SharedKey(_, p, q) => out.extend([p.clone(), q.clone()]),
            Statement::Atom(_) => {}
        }
    }

    pub fn keys(&self, out: &mut Vec<Key>) {
        match self {
            Statement::Believes(_, s)
            | Statement::Sees(_, s)
            | Statement::Said(_, s)
            | Statement::Controls(_, s)
            | Statement::Fresh(s) => s.keys(out),
            Statement::Encrypted(s, k) => {
                out.push(k.clone());
                s.keys(out);
            }
            Statement::Conj(s, t) => {
                s.keys(out);
                t.keys(out);
            }
            Statement::SharedKey(k, ..) => out.push(k.clone()),
            Statement::Atom(_) => {}
        }
    }
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statement::Believes(p, s) => write!(f, "believes {p} {s}"),
            Statement::Sees(p, s) => write!(f, "sees {p} {s}"),
            Statement::Said(p, s) => write!(f, "said {p} {s}"),
            Statement::Controls(p, s) => write!(f, "controls {p} {s}"),
            Statement::Fresh(s) => write!(f, "fresh {s}"),
            Statement::SharedKey(k, p, q) => write!(f, "sharedkey {k} {p} {q}"),
            Statement::Encrypted(s, k) => write!(f, "encrypted {s} {k}"),
            Statement::Conj(s, t) => write!(f, "and {s} {t}"),
            Statement::Atom(a) => f.write_str(a),
        }
    }
}

const KEYWORDS: [&str; 8] = ["believes", "sees", "said", "controls", "fresh", "sharedkey", "encrypted", "and"];

pub(crate) fn is_name(tok: &str) -> bool {
    !tok.is_empty()
        && tok.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !KEYWORDS.contains(&tok.to_ascii_lowercase().as_str())
}

/// Name rewriting applied while parsing: aliases and abbreviations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    pub aliases: BTreeMap<String, String>,
    pub defines: BTreeMap<String, Statement>,
}

impl Lexicon {
    pub fn canonical<'a>(&'a self, name: &'a str) -> &'a str {
        self.aliases.get(name).map(String::as_str).unwrap_or(name)
    }

    /// Parses one statement; `line` is only used in error messages.
    pub fn parse(&self, text: &str, line: usize) -> Result<Statement, BanError> {
        let toks: Vec<&str> = text.split_whitespace().collect();
        let mut pos = 0;
        let s = self.parse_at(&toks, &mut pos, line, 1)?;
        if pos != toks.len() {
            return Err(BanError::Parse { line, msg: format!("unexpected trailing token {:?}", toks[pos]) });
        }
        if s.depth() > MAX_DEPTH {
            return Err(BanError::Parse { line, msg: format!("statement deeper than {MAX_DEPTH}") });
        }
        Ok(s)
    }

    fn name(&self, toks: &[&str], pos: &mut usize, line: usize, what: &str) -> Result<String, BanError> {
        let tok = toks.get(*pos).ok_or_else(|| BanError::Parse { line, msg: format!("expected {what}, found end of line") })?;
        if !is_name(tok) {
            return Err(BanError::Parse { line, msg: format!("expected {what}, found {tok:?}") });
        }
        *pos += 1;
        Ok(self.canonical(tok).to_string())
    }

    fn parse_at(&self, toks: &[&str], pos: &mut usize, line: usize, depth: usize) -> Result<Statement, BanError> {
        let tok = *toks.get(*pos).ok_or_else(|| BanError::Parse { line, msg: "expected a statement".into() })?;
        if depth > MAX_DEPTH {
            return Err(BanError::Parse { line, msg: format!("statement deeper than {MAX_DEPTH}") });
        }
        *pos += 1;
        let s = match tok.to_ascii_lowercase().as_str() {
            "believes" => Statement::Believes(self.name(toks, pos, line, "principal")?, Box::new(self.parse_at(toks, pos, line, depth + 1)?)),
            "sees" => Statement::Sees(self.name(toks, pos, line, "principal")?, Box::new(self.parse_at(toks, pos, line, depth + 1)?)),
            "said" => Statement::Said(self.name(toks, pos, line, "principal")?, Box::new(self.parse_at(toks, pos, line, depth + 1)?)),
            "controls" => Statement::Controls(self.name(toks, pos, line, "principal")?, Box::new(self.parse_at(toks, pos, line, depth + 1)?)),
            "fresh" => Statement::fresh(self.parse_at(toks, pos, line, depth + 1)?),
            "sharedkey" => {
                let k = self.name(toks, pos, line, "key")?;
                let p = self.name(toks, pos, line, "principal")?;
                let q = self.name(toks, pos, line, "principal")?;
                Statement::shared_key(&k, &p, &q)
            }
            "encrypted" => {
                let s = self.parse_at(toks, pos, line, depth + 1)?;
                Statement::encrypted(s, &self.name(toks, pos, line, "key")?)
            }
            "and" => {
                let s = self.parse_at(toks, pos, line, depth + 1)?;
                Statement::conj(s, self.parse_at(toks, pos, line, depth + 1)?)
            }
            _ => {
                *pos -= 1;
                let name = self.name(toks, pos, line, "statement")?;
                match self.defines.get(&name) {
                    Some(def) => def.clone(),
                    None => Statement::Atom(name),
                }
            }
        };
        Ok(s)
    }
}
