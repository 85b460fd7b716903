//! Deterministic discrete-event simulation of a deployment.
//!
//! Time is an integer tick clock. Latency, loss and adversary choices are all
//! drawn from generators seeded by the config, so `(config, seed)` fixes every
//! output byte. A run writes `metrics.json`, `rounds.csv` and `ledger.jsonl`
//! into `run-<config hash>-s<seed>/`.

mod adversary;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use adversary::{AdversaryScenario, AttackKind, AttackOutcome, SimTransport, Target};

use crate::dp::{calibrate_sigma, DpParams};
use crate::flcore::{has_converged, DataConfig, Thresholds, TrainingConfig};
use crate::par::Exec;
use crate::protocol::{Deployment, DeploymentConfig, Edge, Phase, ProtocolError, RoundReport};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("scenario {scenario}: unresolvable target ({reason})")]
    UnresolvableTarget { scenario: usize, reason: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn default_latency() -> (u64, u64) {
    (1, 3)
}

fn default_he_bits() -> u64 {
    256
}

fn default_retransmits() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub n_devices: usize,
    pub n_fogs: usize,
    pub n_microservices: usize,
    pub rounds: u64,
    /// Inclusive `[min, max]` per-hop latency.
    #[serde(default = "default_latency")]
    pub latency_ticks: (u64, u64),
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub dp: Option<DpParams>,
    #[serde(default = "default_he_bits")]
    pub he_bits: u64,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_retransmits")]
    pub max_retransmits: u32,
    /// Take the ledger offline at the start of this round.
    #[serde(default)]
    pub ledger_offline_round: Option<u64>,
    #[serde(default)]
    pub scenarios: Vec<AdversaryScenario>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_devices: 10,
            n_fogs: 2,
            n_microservices: 2,
            rounds: 30,
            latency_ticks: default_latency(),
            drop_rate: 0.0,
            dp: None,
            he_bits: default_he_bits(),
            thresholds: Thresholds::default(),
            training: TrainingConfig::default(),
            data: DataConfig::default(),
            max_retransmits: default_retransmits(),
            ledger_offline_round: None,
            scenarios: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn from_json(s: &str) -> Result<Self, SimError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn deployment(&self, exec: Exec) -> DeploymentConfig {
        DeploymentConfig {
            seed: self.seed,
            n_devices: self.n_devices,
            n_fogs: self.n_fogs,
            n_microservices: self.n_microservices,
            he_bits: self.he_bits,
            training: self.training,
            data: self.data,
            dp: self.dp,
            max_retransmits: self.max_retransmits,
            exec,
        }
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash16(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(json)[..8])
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.n_devices == 0 || self.n_fogs == 0 || self.n_microservices == 0 {
            return bad("n_devices, n_fogs and n_microservices must all be >= 1");
        }
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        let (lo, hi) = self.latency_ticks;
        if lo == 0 || lo > hi {
            return bad("latency_ticks must be [min, max] with 1 <= min <= max");
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return bad("drop_rate must lie in [0, 1)");
        }
        if self.ledger_offline_round.is_some_and(|r| r == 0) {
            return bad("ledger_offline_round counts from 1");
        }
        self.deployment(Exec::Sequential).validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.check_targets()
    }

    fn check_targets(&self) -> Result<(), SimError> {
        let mut seen = BTreeSet::new();
        for (i, s) in self.scenarios.iter().enumerate() {
            let t = s.target;
            let fail = |reason: String| Err(SimError::UnresolvableTarget { scenario: i, reason });
            if t.round == 0 || t.round > self.rounds {
                return fail(format!("round {} outside 1..={}", t.round, self.rounds));
            }
            if s.kind == AttackKind::Eavesdrop {
                continue;
            }
            if s.kind == AttackKind::Impersonate && t.edge != Edge::M1 {
                return fail("impersonation happens on M1".into());
            }
            let count = match t.edge {
                Edge::M1 | Edge::M4 => self.n_devices,
                Edge::M2 => self.n_fogs.min(self.n_devices),
                Edge::M3 => self.n_microservices,
            };
            if t.index >= count {
                return fail(format!("{} has {count} messages per round, index {} requested", t.edge, t.index));
            }
            if !seen.insert((s.kind == AttackKind::Impersonate, t.round, t.edge, t.index)) {
                return fail("another scenario already targets this message".into());
            }
        }
        Ok(())
    }
}

/// One row of `rounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub status: &'static str,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub messages: u64,
    pub bytes: u64,
    pub txs: u64,
    pub core_txs: u64,
    pub key_events: u64,
    pub participants: usize,
    pub retransmissions: u64,
    pub clamped: usize,
    pub sim_time: u64,
}

impl From<&RoundReport> for RoundMetrics {
    fn from(r: &RoundReport) -> Self {
        Self {
            round: r.round,
            status: if r.stall.is_some() { "stalled" } else { "completed" },
            loss: r.loss,
            accuracy: r.accuracy,
            messages: r.messages,
            bytes: r.bytes,
            txs: r.txs,
            core_txs: r.core_txs,
            key_events: r.key_events,
            participants: r.participants,
            retransmissions: r.retransmissions,
            clamped: r.clamped,
            sim_time: r.sim_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StallRecord {
    pub round: u64,
    pub phase: Phase,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpBudget {
    pub epsilon_per_round: f64,
    pub delta_per_round: f64,
    pub sigma: f64,
    pub rounds_budgeted: u64,
    pub epsilon_spent: f64,
    pub delta_spent: f64,
    pub within_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub config_hash: String,
    pub seed: u64,
    pub rounds_planned: u64,
    pub rounds_completed: u64,
    pub stall: Option<StallRecord>,
    pub converged: bool,
    pub converged_round: Option<u64>,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub rounds: Vec<RoundMetrics>,
    pub attacks: Vec<AttackOutcome>,
    pub dp: Option<DpBudget>,
    pub dropped_messages: u64,
    /// Simulated time at the end of the run. No wall-clock time is recorded.
    pub sim_ticks: u64,
    pub ledger_height: u64,
}

impl Metrics {
    /// Attack outcomes summed per kind: `(attempted, detected, succeeded)`.
    pub fn attack_totals(&self, kind: AttackKind) -> (u64, u64, u64) {
        self.attacks
            .iter()
            .filter(|a| a.kind == kind)
            .fold((0, 0, 0), |(a, d, s), o| (a + o.attempted, d + o.detected, s + o.succeeded))
    }
}

/// A finished (or stalled) simulation.
pub struct SimRun {
    pub config: SimConfig,
    pub metrics: Metrics,
    pub ledger_jsonl: String,
    pub deployment: Deployment,
    pub transport: SimTransport,
}

impl std::fmt::Debug for SimRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimRun").field("metrics", &self.metrics).finish_non_exhaustive()
    }
}

impl SimRun {
    pub fn stalled(&self) -> bool {
        self.metrics.stall.is_some()
    }

    pub fn metrics_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.metrics).expect("metrics serialise");
        s.push('\n');
        s
    }

    pub fn rounds_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.metrics.rounds {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }

    pub fn dir_name(&self) -> String {
        format!("run-{}-s{}", self.metrics.config_hash, self.config.seed)
    }

    /// Writes the three run files under `out/<dir_name>/` and returns that directory.
    pub fn write_outputs(&self, out: &Path) -> Result<PathBuf, SimError> {
        let dir = out.join(self.dir_name());
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("metrics.json"), self.metrics_json())?;
        fs::write(dir.join("rounds.csv"), self.rounds_csv())?;
        fs::write(dir.join("ledger.jsonl"), &self.ledger_jsonl)?;
        Ok(dir)
    }
}

pub fn run_simulation(cfg: &SimConfig) -> Result<SimRun, SimError> {
    run_simulation_with(cfg, Exec::default())
}

/// Runs bootstrap plus `cfg.rounds` rounds, stopping at the first stall.
pub fn run_simulation_with(cfg: &SimConfig, exec: Exec) -> Result<SimRun, SimError> {
    cfg.validate()?;
    let mut dep = Deployment::new(cfg.deployment(exec))?;
    let mut net = SimTransport::new(cfg, dep.he_public().clone());
    dep.bootstrap(&mut net)?;

    let mut reports = Vec::new();
    let mut converged_round = None;
    for round in 1..=cfg.rounds {
        if cfg.ledger_offline_round == Some(round) {
            dep.ledger_mut().set_online(false);
        }
        let report = dep.run_round(&mut net)?;
        let stalled = report.stall.is_some();
        reports.push(report);
        if stalled {
            break;
        }
        if converged_round.is_none() && has_converged(dep.global(), &cfg.thresholds) {
            converged_round = Some(round);
        }
    }

    let probes: Vec<(u64, Vec<u8>)> =
        reports.iter().flat_map(|r| r.plaintext_probes.iter().map(move |p| (r.round, p.clone()))).collect();
    let stall = reports.last().and_then(|r| {
        r.stall.as_ref().map(|(phase, missing)| StallRecord { round: r.round, phase: *phase, missing: missing.clone() })
    });
    let completed = reports.iter().filter(|r| r.stall.is_none()).count() as u64;
    let dp = match &cfg.dp {
        Some(p) => Some(DpBudget {
            epsilon_per_round: p.epsilon,
            delta_per_round: p.delta,
            sigma: calibrate_sigma(p).map_err(ProtocolError::from)?,
            rounds_budgeted: p.rounds_budgeted,
            epsilon_spent: p.epsilon_spent(completed),
            delta_spent: p.delta_spent(completed),
            within_budget: completed <= p.rounds_budgeted,
        }),
        None => None,
    };
    let last = dep.global().history.last().copied();
    let metrics = Metrics {
        config_hash: cfg.hash16(),
        seed: cfg.seed,
        rounds_planned: cfg.rounds,
        rounds_completed: completed,
        stall,
        converged: converged_round.is_some(),
        converged_round,
        final_loss: last.map(|r| r.loss),
        final_accuracy: last.map(|r| r.accuracy),
        rounds: reports.iter().map(RoundMetrics::from).collect(),
        attacks: net.outcomes(&probes),
        dp,
        dropped_messages: net.dropped,
        sim_ticks: dep.now(),
        ledger_height: dep.ledger().height(),
    };
    Ok(SimRun { config: cfg.clone(), metrics, ledger_jsonl: dep.ledger().export_jsonl(), deployment: dep, transport: net })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(rounds: u64) -> SimConfig {
        SimConfig { n_devices: 4, rounds, seed: 11, ..SimConfig::default() }
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let err = SimConfig::from_json(r#"{"seed":1,"n_devices":2,"n_fogs":1,"n_microservices":1,"rounds":1,"bogus":3}"#)
            .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let ok = SimConfig::from_json(r#"{"seed":1,"n_devices":2,"n_fogs":1,"n_microservices":1,"rounds":1}"#).unwrap();
        assert_eq!(ok.latency_ticks, (1, 3));
    }

    #[test]
    fn config_validation() {
        for bad in [
            SimConfig { n_devices: 0, ..quick(1) },
            SimConfig { drop_rate: 1.0, ..quick(1) },
            SimConfig { latency_ticks: (3, 2), ..quick(1) },
            SimConfig { he_bits: 512, ..quick(1) },
        ] {
            assert!(matches!(bad.validate(), Err(SimError::Config(_))), "{bad:?}");
        }
        let t = |edge, index| AdversaryScenario { kind: AttackKind::Modify, target: Target { round: 1, edge, index }, attrs: vec![] };
        assert!(matches!(
            SimConfig { scenarios: vec![t(Edge::M3, 2)], ..quick(1) }.validate(),
            Err(SimError::UnresolvableTarget { scenario: 0, .. })
        ));
        assert!(SimConfig { scenarios: vec![t(Edge::M3, 1)], ..quick(1) }.validate().is_ok());
    }

    #[test]
    fn csv_rows_and_cross_count() {
        let run = run_simulation(&quick(3)).unwrap();
        assert_eq!(run.metrics.rounds.len(), 3);
        assert_eq!(run.rounds_csv().lines().count(), 4);
        let chain = run.deployment.ledger().chain();
        for r in &run.metrics.rounds {
            let block = &chain[r.round as usize + 1];
            assert_eq!(r.messages, block.txs.iter().filter(|t| t.kind.is_core()).count() as u64);
        }
    }

    #[test]
    fn ledger_offline_stalls_with_partial_csv() {
        let run = run_simulation(&SimConfig { ledger_offline_round: Some(3), ..quick(5) }).unwrap();
        let stall = run.metrics.stall.as_ref().unwrap();
        assert_eq!(stall.round, 3);
        assert_eq!(stall.phase, Phase::Upload);
        assert_eq!(run.metrics.rounds.len(), 3);
        assert_eq!(run.metrics.rounds_completed, 2);
    }

    #[test]
    fn lossy_network_still_completes_via_retransmission() {
        let run = run_simulation(&SimConfig { drop_rate: 0.2, max_retransmits: 6, ..quick(3) }).unwrap();
        assert!(run.metrics.dropped_messages > 0);
        assert!(run.metrics.stall.is_none(), "{:?}", run.metrics.stall);
    }
}
