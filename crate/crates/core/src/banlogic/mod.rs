//! Forward-chaining BAN-logic engine for the round protocol.
//!
//! Rules:
//!
//! * R1 message meaning: `P believes sharedkey K P Q`, `P sees encrypted S K` give `P believes Q said S`
//! * R2 nonce verification: `P believes fresh S`, `P believes Q said S` give `P believes Q believes S`
//! * R3 jurisdiction: `P believes Q controls S`, `P believes Q believes S` give `P believes S`
//! * R4 decomposition: `P sees and S T` gives `P sees S` and `P sees T`
//! * R5 key anchoring: `P believes sharedkey K P Q`, `Q believes L controls A` give
//!   `Q believes sharedkey K P Q`, where `anchor L A` names the ledger and its key log
//! * R6 jurisdiction split: `P believes Q controls and S T` gives control over `S` and over `T`
//!
//! R5 and R6 are not classic BAN. R5 models keys whose establishment is logged
//! on a ledger both ends trust; R6 lets trust in a log extend to each record type.
//! Every rule only wraps sub-statements of its premises, so closure terminates.

mod syntax;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

pub use syntax::{Key, Lexicon, Principal, Statement, MAX_DEPTH};

/// The theory shipped with the crate.
pub const SHIPPED_THEORY: &str = include_str!("../../theory/fldabe.ban");

/// Upper bound on closure passes.
pub const MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BanError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("closure did not converge in {0} passes")]
    NoFixpoint(usize),
    #[error("unknown goal label {0:?}")]
    UnknownGoal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    MessageMeaning,
    NonceVerification,
    Jurisdiction,
    Decomposition,
    KeyAnchoring,
    JurisdictionSplit,
}

impl Rule {
    pub fn code(self) -> &'static str {
        match self {
            Rule::MessageMeaning => "R1",
            Rule::NonceVerification => "R2",
            Rule::Jurisdiction => "R3",
            Rule::Decomposition => "R4",
            Rule::KeyAnchoring => "R5",
            Rule::JurisdictionSplit => "R6",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// A labelled statement from a theory file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labelled {
    pub label: String,
    pub statement: Statement,
    pub line: usize,
}

/// A parsed theory file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Theory {
    pub lexicon: Lexicon,
    /// `(ledger principal, key-log atom)` enabling R5.
    pub anchor: Option<(Principal, Statement)>,
    pub axioms: Vec<Labelled>,
    pub messages: Vec<Labelled>,
    pub freshness: Vec<Labelled>,
    pub goals: Vec<Labelled>,
}

impl Theory {
    pub fn shipped() -> Self {
        Self::parse(SHIPPED_THEORY).expect("shipped theory parses")
    }

    pub fn parse(text: &str) -> Result<Self, BanError> {
        let mut t = Theory::default();
        let mut labels = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |msg: String| BanError::Parse { line, msg };
            let (head, rest) = body.split_once(char::is_whitespace).unwrap_or((body, ""));
            let rest = rest.trim();
            match head {
                "alias" => {
                    let (canon, names) = rest.split_once('=').ok_or_else(|| err("alias needs CANON = NAME...".into()))?;
                    let canon = canon.trim();
                    if !syntax::is_name(canon) {
                        return Err(err(format!("bad alias target {canon:?}")));
                    }
                    for n in names.split_whitespace() {
                        if !syntax::is_name(n) || n == canon {
                            return Err(err(format!("bad alias name {n:?}")));
                        }
                        if t.lexicon.aliases.insert(n.to_string(), canon.to_string()).is_some() {
                            return Err(err(format!("{n} aliased twice")));
                        }
                    }
                }
                "define" => {
                    let (name, stmt) = rest.split_once('=').ok_or_else(|| err("define needs NAME = STATEMENT".into()))?;
                    let name = name.trim();
                    if !syntax::is_name(name) {
                        return Err(err(format!("bad define name {name:?}")));
                    }
                    let s = t.lexicon.parse(stmt, line)?;
                    t.lexicon.defines.insert(name.to_string(), s);
                }
                "anchor" => {
                    let mut it = rest.split_whitespace();
                    let (Some(l), Some(a), None) = (it.next(), it.next(), it.next()) else {
                        return Err(err("anchor needs LEDGER ATOM".into()));
                    };
                    if !syntax::is_name(l) {
                        return Err(err(format!("bad ledger principal {l:?}")));
                    }
                    let atom = t.lexicon.parse(a, line)?;
                    t.anchor = Some((t.lexicon.canonical(l).to_string(), atom));
                }
                "axiom" | "message" | "fresh" | "goal" => {
                    let (label, stmt) = rest.split_once(':').ok_or_else(|| err(format!("{head} needs LABEL: STATEMENT")))?;
                    let label = label.trim();
                    if !syntax::is_name(label) {
                        return Err(err(format!("bad label {label:?}")));
                    }
                    if !labels.insert(label.to_string()) {
                        return Err(err(format!("duplicate label {label}")));
                    }
                    let entry = Labelled { label: label.to_string(), statement: t.lexicon.parse(stmt, line)?, line };
                    match head {
                        "axiom" => t.axioms.push(entry),
                        "message" => t.messages.push(entry),
                        "fresh" => t.freshness.push(entry),
                        _ => t.goals.push(entry),
                    }
                }
                other => return Err(err(format!("unknown directive {other:?}"))),
            }
        }
        Ok(t)
    }

    /// The theory minus axioms labelled `label` or `label.*`.
    pub fn without_axiom(&self, label: &str) -> Self {
        let mut t = self.clone();
        let prefix = format!("{label}.");
        t.axioms.retain(|a| a.label != label && !a.label.starts_with(&prefix));
        t
    }

    /// Resolves a goal given as a label or as statement text.
    pub fn goal(&self, query: &str) -> Result<Statement, BanError> {
        if let Some(g) = self.goals.iter().find(|g| g.label == query.trim()) {
            return Ok(g.statement.clone());
        }
        if syntax::is_name(query.trim()) && !query.trim().starts_with(char::is_lowercase) {
            return Err(BanError::UnknownGoal(query.to_string()));
        }
        self.lexicon.parse(query, 0)
    }

    pub fn parse_statement(&self, text: &str) -> Result<Statement, BanError> {
        self.lexicon.parse(text, 0)
    }
}

/// How a fact entered the knowledge base.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Given(String),
    Derived { rule: Rule, premises: Vec<Statement> },
}

/// One line of a derivation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub conclusion: Statement,
    pub origin: Origin,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.origin {
            Origin::Given(label) => write!(f, "[{label}] {}", self.conclusion),
            Origin::Derived { rule, premises } => {
                let ps: Vec<String> = premises.iter().map(|p| format!("({p})")).collect();
                write!(f, "[{rule}] {} <= {}", self.conclusion, ps.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    facts: BTreeSet<Statement>,
    /// Derivation of each fact, in the order facts were added.
    trace: Vec<Step>,
    origin: BTreeMap<Statement, usize>,
    anchor: Option<(Principal, Statement)>,
    messages: Vec<Labelled>,
}

impl KnowledgeBase {
    /// Axioms only; protocol messages are added by [`assert_protocol_messages`].
    pub fn from_theory(theory: &Theory) -> Self {
        let mut kb = Self {
            facts: BTreeSet::new(),
            trace: Vec::new(),
            origin: BTreeMap::new(),
            anchor: theory.anchor.clone(),
            messages: theory.messages.iter().chain(&theory.freshness).cloned().collect(),
        };
        for a in &theory.axioms {
            kb.add(a.statement.clone(), Origin::Given(a.label.clone()));
        }
        kb
    }

    fn add(&mut self, s: Statement, origin: Origin) -> bool {
        if self.facts.contains(&s) {
            return false;
        }
        self.origin.insert(s.clone(), self.trace.len());
        self.trace.push(Step { conclusion: s.clone(), origin });
        self.facts.insert(s);
        true
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn contains(&self, s: &Statement) -> bool {
        self.facts.contains(s)
    }

    pub fn facts(&self) -> impl Iterator<Item = &Statement> {
        self.facts.iter()
    }

    pub fn trace(&self) -> &[Step] {
        &self.trace
    }

    /// Given facts (axioms and messages), by label.
    pub fn given(&self) -> impl Iterator<Item = (&str, &Statement)> {
        self.trace.iter().filter_map(|s| match &s.origin {
            Origin::Given(l) => Some((l.as_str(), &s.conclusion)),
            Origin::Derived { .. } => None,
        })
    }

    fn universe(&self, extra: &Statement) -> (Vec<Principal>, Vec<Key>) {
        let (mut ps, mut ks) = (Vec::new(), Vec::new());
        for s in self.facts.iter().chain(std::iter::once(extra)) {
            s.principals(&mut ps);
            s.keys(&mut ks);
        }
        ps.sort();
        ps.dedup();
        ks.sort();
        ks.dedup();
        (ps, ks)
    }
}

/// The shipped axioms.
pub fn load_axioms() -> KnowledgeBase {
    KnowledgeBase::from_theory(&Theory::shipped())
}

/// Adds the message postulates and freshness facts of the theory the KB was
/// built from. Idempotent.
pub fn assert_protocol_messages(kb: &mut KnowledgeBase) {
    for m in kb.messages.clone() {
        kb.add(m.statement, Origin::Given(m.label));
    }
}

/// Everything `rule` concludes from `premises`, in premise order.
pub fn apply_rule(rule: Rule, premises: &[Statement], anchor: Option<&(Principal, Statement)>) -> Vec<Statement> {
    use Statement::*;
    match (rule, premises) {
        (Rule::MessageMeaning, [Believes(p, k), Sees(p2, e)]) if p == p2 => match (&**k, &**e) {
            (SharedKey(k, a, b), Encrypted(s, k2)) if k == k2 && (a == p || b == p) && a != b => {
                let q = if a == p { b } else { a };
                vec![Statement::believes(p, Statement::said(q, (**s).clone()))]
            }
            _ => vec![],
        },
        (Rule::NonceVerification, [Believes(p, f), Believes(p2, said)]) if p == p2 => match (&**f, &**said) {
            (Fresh(s), Said(q, s2)) if s == s2 => vec![Statement::believes(p, Statement::believes(q, (**s).clone()))],
            _ => vec![],
        },
        (Rule::Jurisdiction, [Believes(p, c), Believes(p2, b)]) if p == p2 => match (&**c, &**b) {
            (Controls(q, s), Believes(q2, s2)) if q == q2 && s == s2 => vec![Statement::believes(p, (**s).clone())],
            _ => vec![],
        },
        (Rule::Decomposition, [Sees(p, c)]) => match &**c {
            Conj(s, t) => vec![Statement::sees(p, (**s).clone()), Statement::sees(p, (**t).clone())],
            _ => vec![],
        },
        (Rule::KeyAnchoring, [Believes(p, k), Believes(q, c)]) => match (anchor, &**k, &**c) {
            (Some((l, atom)), SharedKey(_, a, b), Controls(l2, a2))
                if l == l2 && atom == &**a2 && p != q && ((a == p && b == q) || (a == q && b == p)) =>
            {
                vec![Statement::believes(q, (**k).clone())]
            }
            _ => vec![],
        },
        (Rule::JurisdictionSplit, [Believes(p, c)]) => match &**c {
            Controls(q, conj) => match &**conj {
                Conj(s, t) => vec![
                    Statement::believes(p, Statement::controls(q, (**s).clone())),
                    Statement::believes(p, Statement::controls(q, (**t).clone())),
                ],
                _ => vec![],
            },
            _ => vec![],
        },
        _ => vec![],
    }
}

/// Runs all rules to a fixed point. Returns the number of passes.
pub fn derive_closure(kb: &mut KnowledgeBase) -> Result<usize, BanError> {
    for pass in 1..=MAX_ITERATIONS {
        let facts: Vec<Statement> = kb.facts.iter().cloned().collect();
        let mut new = Vec::new();
        for a in &facts {
            for rule in [Rule::Decomposition, Rule::JurisdictionSplit] {
                for c in apply_rule(rule, std::slice::from_ref(a), kb.anchor.as_ref()) {
                    new.push((c, rule, vec![a.clone()]));
                }
            }
            // Two-premise rules only fire when the first premise is a belief.
            if !matches!(a, Statement::Believes(..)) {
                continue;
            }
            for b in &facts {
                for rule in [Rule::MessageMeaning, Rule::NonceVerification, Rule::Jurisdiction, Rule::KeyAnchoring] {
                    let premises = [a.clone(), b.clone()];
                    for c in apply_rule(rule, &premises, kb.anchor.as_ref()) {
                        new.push((c, rule, premises.to_vec()));
                    }
                }
            }
        }
        let mut grew = false;
        for (c, rule, premises) in new {
            grew |= kb.add(c, Origin::Derived { rule, premises });
        }
        if !grew {
            return Ok(pass);
        }
    }
    Err(BanError::NoFixpoint(MAX_ITERATIONS))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GoalResult {
    /// Steps from given facts to the goal, premises before conclusions.
    Derivable(Vec<Step>),
    /// Smallest set of missing facts found that would make the goal derivable.
    NotDerivable(Vec<Statement>),
}

impl GoalResult {
    pub fn is_derivable(&self) -> bool {
        matches!(self, GoalResult::Derivable(_))
    }
}

/// Checks `goal` against a closed knowledge base.
pub fn check_goal(kb: &KnowledgeBase, goal: &Statement) -> GoalResult {
    if kb.contains(goal) {
        let mut steps = Vec::new();
        let mut seen = BTreeSet::new();
        collect_trace(kb, goal, &mut seen, &mut steps);
        return GoalResult::Derivable(steps);
    }
    let (principals, keys) = kb.universe(goal);
    let search = Frontier { kb, principals, keys };
    let mut visiting = BTreeSet::new();
    GoalResult::NotDerivable(search.missing(goal, FRONTIER_DEPTH, &mut visiting))
}

fn collect_trace(kb: &KnowledgeBase, s: &Statement, seen: &mut BTreeSet<Statement>, out: &mut Vec<Step>) {
    if !seen.insert(s.clone()) {
        return;
    }
    let step = &kb.trace[kb.origin[s]];
    if let Origin::Derived { premises, .. } = &step.origin {
        for p in premises {
            collect_trace(kb, p, seen, out);
        }
    }
    out.push(step.clone());
}

/// Checks that every step of `steps` is either given in `kb` or follows by
/// its rule from earlier steps.
pub fn replay_trace(kb: &KnowledgeBase, steps: &[Step]) -> bool {
    let mut known: BTreeSet<&Statement> = BTreeSet::new();
    for step in steps {
        let ok = match &step.origin {
            Origin::Given(label) => kb.given().any(|(l, s)| l == label && s == &step.conclusion),
            Origin::Derived { rule, premises } => {
                premises.iter().all(|p| known.contains(p))
                    && apply_rule(*rule, premises, kb.anchor.as_ref()).contains(&step.conclusion)
            }
        };
        if !ok {
            return false;
        }
        known.insert(&step.conclusion);
    }
    true
}

const FRONTIER_DEPTH: usize = 6;

struct Frontier<'a> {
    kb: &'a KnowledgeBase,
    principals: Vec<Principal>,
    keys: Vec<Key>,
}

impl Frontier<'_> {
    /// Premise sets of rule instances that would conclude `goal`. Facts that
    /// only a theory can supply (sightings, freshness, jurisdiction) have none.
    fn alternatives(&self, goal: &Statement) -> Vec<Vec<Statement>> {
        let mut alts = Vec::new();
        let Statement::Believes(p, inner) = goal else { return alts };
        match &**inner {
            Statement::Fresh(_) | Statement::Controls(..) => {}
            Statement::Said(q, s) => {
                let seen: Vec<&Key> =
                    self.keys.iter().filter(|k| self.kb.contains(&Statement::sees(p, Statement::encrypted((**s).clone(), k)))).collect();
                let keys = if seen.is_empty() { self.keys.iter().collect() } else { seen };
                for k in keys {
                    alts.push(vec![
                        Statement::believes(p, Statement::shared_key(k, p, q)),
                        Statement::sees(p, Statement::encrypted((**s).clone(), k)),
                    ]);
                }
            }
            Statement::SharedKey(_, a, b) => {
                if let Some((l, atom)) = &self.kb.anchor {
                    if a == p || b == p {
                        let other = if a == p { b } else { a };
                        alts.push(vec![
                            Statement::believes(other, (**inner).clone()),
                            Statement::believes(p, Statement::controls(l, atom.clone())),
                        ]);
                    }
                }
            }
            other => {
                if let Statement::Believes(q, s) = other {
                    alts.push(vec![
                        Statement::believes(p, Statement::fresh((**s).clone())),
                        Statement::believes(p, Statement::said(q, (**s).clone())),
                    ]);
                }
                // Jurisdiction, through principals p already trusts on this
                // statement, or any other principal when there are none.
                let trusted: Vec<&Principal> = self
                    .principals
                    .iter()
                    .filter(|q| self.kb.contains(&Statement::believes(p, Statement::controls(q, other.clone()))))
                    .collect();
                let candidates = if trusted.is_empty() && !matches!(other, Statement::Believes(..)) {
                    self.principals.iter().filter(|q| *q != p).collect()
                } else {
                    trusted
                };
                for q in candidates {
                    alts.push(vec![
                        Statement::believes(p, Statement::controls(q, other.clone())),
                        Statement::believes(p, Statement::believes(q, other.clone())),
                    ]);
                }
            }
        }
        alts
    }

    /// Smallest set of missing facts under `goal`, or `None` if every route
    /// loops back into the search.
    fn search(&self, goal: &Statement, depth: usize, visiting: &mut BTreeSet<Statement>) -> Option<BTreeSet<Statement>> {
        if self.kb.contains(goal) {
            return Some(BTreeSet::new());
        }
        if visiting.contains(goal) {
            return None;
        }
        let alts = if depth == 0 || goal.depth() >= MAX_DEPTH { Vec::new() } else { self.alternatives(goal) };
        if alts.is_empty() {
            return Some(BTreeSet::from([goal.clone()]));
        }
        visiting.insert(goal.clone());
        let mut best: Option<BTreeSet<Statement>> = None;
        'alt: for alt in alts {
            let mut need = BTreeSet::new();
            for p in &alt {
                match self.search(p, depth - 1, visiting) {
                    Some(m) => need.extend(m),
                    None => continue 'alt,
                }
                if best.as_ref().is_some_and(|b| need.len() >= b.len()) {
                    continue 'alt;
                }
            }
            best = Some(need);
        }
        visiting.remove(goal);
        Some(best.unwrap_or_else(|| BTreeSet::from([goal.clone()])))
    }

    fn missing(&self, goal: &Statement, depth: usize, visiting: &mut BTreeSet<Statement>) -> Vec<Statement> {
        self.search(goal, depth, visiting).unwrap_or_else(|| BTreeSet::from([goal.clone()])).into_iter().collect()
    }
}

/// Builds, closes, and returns the knowledge base of `theory`.
pub fn closed(theory: &Theory) -> Result<KnowledgeBase, BanError> {
    let mut kb = KnowledgeBase::from_theory(theory);
    assert_protocol_messages(&mut kb);
    derive_closure(&mut kb)?;
    Ok(kb)
}
