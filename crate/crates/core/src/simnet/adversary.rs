//! The simulated network: latency, loss, and adversaries acting on the wire.

use ed25519_dalek::SigningKey;
use num_bigint::{BigUint, RandBigInt};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::SimConfig;
use crate::dabe::{dabe_encrypt, AuthorityDirectory};
use crate::he::{he_encrypt, HePublicKey};
use crate::ledger::{Ledger, Transaction};
use crate::protocol::{authority_universes, device_id, edge_policy, Body, Edge, Envelope, Impostor, Transport, Verdict};
use crate::{seed_bytes, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    /// Re-sends a captured message verbatim, ledger transaction included.
    Replay,
    /// Flips one ciphertext byte in flight.
    Modify,
    /// Swaps the content for attacker-encrypted content.
    Mitm,
    /// Pushes an M1 under a device's name with a keyring lacking `fl-client`.
    Impersonate,
    /// Records every byte on the wire from the target round on.
    Eavesdrop,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Replay => "replay",
            AttackKind::Modify => "modify",
            AttackKind::Mitm => "mitm",
            AttackKind::Impersonate => "impersonate",
            AttackKind::Eavesdrop => "eavesdrop",
        }
    }
}

/// The `index`-th message of type `edge` sent in `round`. For M4 the index
/// is the recipient device; for Impersonate it is the device whose name is claimed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub round: u64,
    pub edge: Edge,
    #[serde(default)]
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryScenario {
    pub kind: AttackKind,
    pub target: Target,
    /// Impersonate only: attributes the impostor holds (default `["iot"]`).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attrs: Vec<String>,
}

/// What happened to one scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttackOutcome {
    pub kind: AttackKind,
    pub round: u64,
    pub edge: Edge,
    pub index: usize,
    pub attempted: u64,
    /// Stopped by a ledger or receiver check.
    pub detected: u64,
    /// Forged content accepted, or (Eavesdrop) plaintext found on the wire.
    pub succeeded: u64,
    /// Which checks flagged the attempt.
    pub flagged_by: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leak_matches: Option<u64>,
}

#[derive(Debug, Clone)]
struct Active {
    scenario: AdversaryScenario,
    fired: bool,
    /// `(receiver, envelope as delivered)` of the forged copy.
    forged: Option<(String, Envelope)>,
    /// Verdicts seen for `forged`; a replayed copy is the second one.
    seen: usize,
    flagged_by: Vec<String>,
    accepted: bool,
}

/// Deterministic lossy network with adversaries.
pub struct SimTransport {
    rng: ChaCha20Rng,
    attacker_rng: ChaCha20Rng,
    latency: (u64, u64),
    drop_rate: f64,
    n_fogs: usize,
    active: Vec<Active>,
    counters: std::collections::BTreeMap<(u64, Edge), usize>,
    rogue: AuthorityDirectory,
    attacker_key: SigningKey,
    cloud_pk: HePublicKey,
    /// Transactions the attacker tries to log at the next `inject`, by scenario.
    to_ledger: Vec<(usize, Transaction)>,
    to_inject: Vec<(String, u64, Envelope)>,
    tap: Vec<u8>,
    tap_from: Option<u64>,
    impostor_round: u64,
    pub dropped: u64,
}

impl SimTransport {
    pub fn new(cfg: &SimConfig, cloud_pk: HePublicKey) -> Self {
        let mut rogue = AuthorityDirectory::new();
        for (id, universe) in authority_universes(cfg.n_fogs) {
            let universe: Vec<&str> = universe.iter().map(String::as_str).collect();
            rogue
                .setup_authority(id, &universe, &seed_bytes(cfg.seed, &format!("rogue/{id}")))
                .expect("fresh directory with distinct names");
        }
        let active = cfg
            .scenarios
            .iter()
            .map(|s| Active { scenario: s.clone(), fired: false, forged: None, seen: 0, flagged_by: Vec::new(), accepted: false })
            .collect();
        let tap_from = cfg.scenarios.iter().filter(|s| s.kind == AttackKind::Eavesdrop).map(|s| s.target.round).min();
        Self {
            rng: seeded_rng(cfg.seed, "net"),
            attacker_rng: seeded_rng(cfg.seed, "attacker"),
            latency: cfg.latency_ticks,
            drop_rate: cfg.drop_rate,
            n_fogs: cfg.n_fogs,
            active,
            counters: Default::default(),
            rogue,
            attacker_key: SigningKey::from_bytes(&seed_bytes(cfg.seed, "attacker/sign")),
            cloud_pk,
            to_ledger: Vec::new(),
            to_inject: Vec::new(),
            tap: Vec::new(),
            tap_from,
            impostor_round: 0,
            dropped: 0,
        }
    }

    /// Everything the eavesdropper recorded.
    pub fn transcript(&self) -> &[u8] {
        &self.tap
    }

    /// Per-scenario outcomes; `probes` are the plaintext weight encodings to
    /// scan the eavesdropper's transcript for.
    pub fn outcomes(&self, probes: &[(u64, Vec<u8>)]) -> Vec<AttackOutcome> {
        self.active
            .iter()
            .map(|a| {
                let s = &a.scenario;
                let mut out = AttackOutcome {
                    kind: s.kind,
                    round: s.target.round,
                    edge: s.target.edge,
                    index: s.target.index,
                    attempted: u64::from(a.fired),
                    detected: 0,
                    succeeded: 0,
                    flagged_by: a.flagged_by.clone(),
                    leak_matches: None,
                };
                if s.kind == AttackKind::Eavesdrop {
                    let finder = |p: &Vec<u8>| memchr::memmem::find(&self.tap, p).is_some();
                    let hits = probes.iter().filter(|(r, p)| *r >= s.target.round && finder(p)).count() as u64;
                    out.attempted = 1;
                    out.succeeded = u64::from(hits > 0);
                    out.leak_matches = Some(hits);
                } else if a.fired {
                    out.succeeded = u64::from(a.accepted);
                    out.detected = u64::from(!a.accepted && !a.flagged_by.is_empty());
                }
                out
            })
            .collect()
    }

    fn latency(&mut self) -> u64 {
        self.rng.gen_range(self.latency.0..=self.latency.1)
    }

    fn flip(&mut self, mut env: Envelope) -> Envelope {
        match &mut env.body {
            Body::M3 { cts, .. } => {
                let i = self.attacker_rng.gen_range(0..cts.len().max(1));
                if let Some(c) = cts.get_mut(i) {
                    c.value ^= BigUint::from(1u8 << self.attacker_rng.gen_range(0..8));
                }
            }
            body => {
                let ct = body.dabe_mut().expect("DABE edge");
                if ct.ciphertext.is_empty() {
                    ct.tag[0] ^= 1;
                } else {
                    let i = self.attacker_rng.gen_range(0..ct.ciphertext.len());
                    ct.ciphertext[i] ^= 1 << self.attacker_rng.gen_range(0..8);
                }
            }
        }
        env
    }

    /// Replaces the body with attacker content; the header and the logged
    /// transaction stay as captured since the attacker cannot sign for the sender.
    fn substitute(&mut self, idx: usize, mut env: Envelope) -> Envelope {
        let rng = &mut self.attacker_rng;
        match &mut env.body {
            Body::M3 { cts, .. } => {
                for c in cts.iter_mut() {
                    let m = rng.gen_biguint_below(self.cloud_pk.n());
                    *c = he_encrypt(&self.cloud_pk, &m, rng).expect("m < n");
                }
            }
            body => {
                let edge = body.edge();
                let ct = body.dabe_mut().expect("DABE edge");
                let to = env.header.receiver.rsplit('-').next().and_then(|s| s.parse().ok()).unwrap_or(0);
                let policy = self
                    .rogue
                    .parse_policy(&edge_policy(edge, to.min(self.n_fogs.saturating_sub(1))).expect("DABE edge"))
                    .expect("rogue directory mirrors the real universes");
                let mut junk = vec![0u8; ct.ciphertext.len()];
                rng.fill(&mut junk[..]);
                *ct = dabe_encrypt(&junk, &policy, &self.rogue, ct.epoch, rng).expect("policy resolves");
            }
        }
        // The attacker also tries to log the substitute under the sender's name.
        let forged = Transaction::signed(
            env.tx.kind,
            &env.header.sender,
            env.payload_hash(),
            env.header.nonce,
            env.tx.sim_time,
            &self.attacker_key,
        );
        self.to_ledger.push((idx, forged));
        env
    }
}

impl Transport for SimTransport {
    fn carry(&mut self, env: &Envelope, to: &str, now: u64) -> Vec<(u64, Envelope)> {
        let key = (env.header.round, env.edge());
        let n = self.counters.entry(key).or_default();
        let index = *n;
        *n += 1;

        let hit = self.active.iter().position(|a| {
            let t = a.scenario.target;
            !a.fired
                && matches!(a.scenario.kind, AttackKind::Replay | AttackKind::Modify | AttackKind::Mitm)
                && (t.round, t.edge, t.index) == (key.0, key.1, index)
        });
        let delivered = match hit {
            Some(i) => {
                self.active[i].fired = true;
                let t = now + self.latency();
                let env = match self.active[i].scenario.kind {
                    AttackKind::Replay => {
                        self.to_ledger.push((i, env.tx.clone()));
                        self.to_inject.push((to.to_string(), t + 1, env.clone()));
                        env.clone()
                    }
                    AttackKind::Modify => self.flip(env.clone()),
                    _ => self.substitute(i, env.clone()),
                };
                self.active[i].forged = Some((to.to_string(), env.clone()));
                vec![(t, env)]
            }
            None if self.drop_rate > 0.0 && self.rng.gen_bool(self.drop_rate) => {
                self.dropped += 1;
                Vec::new()
            }
            None => vec![(now + self.latency(), env.clone())],
        };
        if self.tap_from.is_some_and(|r| env.header.round >= r) {
            for (_, e) in &delivered {
                self.tap.extend_from_slice(&e.to_bytes());
            }
        }
        delivered
    }

    fn inject(&mut self, _round: u64, _edge: Edge, ledger: &mut Ledger, _now: u64) -> Vec<(String, u64, Envelope)> {
        for (i, tx) in std::mem::take(&mut self.to_ledger) {
            if let Err(e) = ledger.submit_transaction(tx) {
                self.active[i].flagged_by.push(format!("ledger: {e}"));
            }
        }
        std::mem::take(&mut self.to_inject)
    }

    fn impostors(&mut self, round: u64) -> Vec<Impostor> {
        self.impostor_round = round;
        let mut out = Vec::new();
        for a in &mut self.active {
            let s = &a.scenario;
            if s.kind == AttackKind::Impersonate && s.target.round == round && !a.fired {
                a.fired = true;
                let attrs = if s.attrs.is_empty() { vec!["iot".to_string()] } else { s.attrs.clone() };
                out.push(Impostor { claimed_id: device_id(s.target.index), fog: s.target.index % self.n_fogs, attrs });
            }
        }
        out
    }

    fn verdict(&mut self, to: &str, env: &Envelope, verdict: &Verdict) {
        for a in &mut self.active {
            let Some((fto, fenv)) = &a.forged else { continue };
            if fto != to || fenv != env {
                continue;
            }
            a.seen += 1;
            // The original of a replayed message arrives first and is honest.
            if a.scenario.kind == AttackKind::Replay && a.seen < 2 {
                continue;
            }
            match verdict {
                Verdict::Accepted => a.accepted = true,
                Verdict::Rejected(r) => a.flagged_by.push(format!("{to}: {r:?}")),
            }
        }
    }

    fn impostor_outcome(&mut self, imp: &Impostor, rejected: bool, accepted: bool) {
        let a = self.active.iter_mut().find(|a| {
            a.scenario.kind == AttackKind::Impersonate
                && a.scenario.target.round == self.impostor_round
                && device_id(a.scenario.target.index) == imp.claimed_id
        });
        if let Some(a) = a {
            a.accepted |= accepted;
            if rejected {
                a.flagged_by.push(format!("fog-{}: authentication and M1 checks", imp.fog));
            }
        }
    }
}
