//! `fldabe`: simulation runs, attack scenarios, ledger audits, BAN checks and
//! attribute key generation.
//!
//! Exit codes: 0 success, 1 verification failure, 2 stall, 3 input error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use fldabe_core::banlogic::{check_goal, closed, GoalResult, Theory, SHIPPED_THEORY};
use fldabe_core::dabe::authority_setup;
use fldabe_core::ledger::{audit_export, parse_jsonl, Block, FaultReason};
use fldabe_core::par::Exec;
use fldabe_core::protocol::authority_universes;
use fldabe_core::seed_bytes;
use fldabe_core::simnet::{run_simulation_with, AdversaryScenario, AttackKind, SimConfig, SimError};

#[derive(Parser)]
#[command(name = "fldabe", version, about = "Federated learning over DABE, HE, SMPC and a ledger: simulator and checkers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a simulation and write metrics.json, rounds.csv and ledger.jsonl.
    Run(RunArgs),
    /// Same as `run`, but requires adversary scenarios and fails if any attack succeeds.
    Attack(RunArgs),
    /// Check BAN goals against a theory file.
    Ban(BanArgs),
    /// Ledger tools.
    Ledger {
        #[command(subcommand)]
        cmd: LedgerCmd,
    },
    /// Issue a user keyring from one attribute authority.
    Keygen(KeygenArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON array of scenarios appended to those in the config.
    #[arg(long)]
    scenarios: Option<PathBuf>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct BanArgs {
    /// Theory file; the bundled theory when omitted.
    #[arg(long)]
    theory: Option<PathBuf>,
    /// Goal label or statement text. Repeatable.
    #[arg(long)]
    goal: Vec<String>,
    /// Check every goal declared in the theory.
    #[arg(long)]
    all_goals: bool,
    /// Remove an axiom (or an axiom group such as `A1`) before checking. Repeatable.
    #[arg(long)]
    drop_axiom: Vec<String>,
}

#[derive(Subcommand)]
enum LedgerCmd {
    /// Verify an exported chain and cross-check it against a run's rounds.csv.
    Audit {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        rounds: Option<PathBuf>,
    },
}

#[derive(Args)]
struct KeygenArgs {
    #[arg(long)]
    authority: String,
    /// Comma-separated attribute names.
    #[arg(long, value_delimiter = ',', required = true)]
    attrs: Vec<String>,
    #[arg(long)]
    gid: String,
    #[arg(long, default_value_t = 1)]
    epoch: u64,
    /// Deployment seed the authority keys derive from.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of fog regions in the deployment.
    #[arg(long, default_value_t = 2)]
    n_fogs: usize,
}

/// A command failure carrying its exit code.
#[derive(Debug)]
enum Fail {
    Verify(String),
    Stall(String),
    Input(anyhow::Error),
}

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Verify(_) => 1,
            Fail::Stall(_) => 2,
            Fail::Input(_) => 3,
        }
    }
}

impl From<anyhow::Error> for Fail {
    fn from(e: anyhow::Error) -> Self {
        Fail::Input(e)
    }
}

type CmdResult = Result<(), Fail>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run(a) => cmd_run(&a, false),
        Cmd::Attack(a) => cmd_run(&a, true),
        Cmd::Ban(a) => cmd_ban(&a),
        Cmd::Ledger { cmd: LedgerCmd::Audit { chain, rounds } } => cmd_audit(&chain, rounds.as_deref()),
        Cmd::Keygen(a) => cmd_keygen(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Fail::Verify(m) => eprintln!("verification failed: {m}"),
                Fail::Stall(m) => eprintln!("stalled: {m}"),
                Fail::Input(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// Parses JSON reporting the path of the offending key on failure.
fn parse_json<T: for<'de> Deserialize<'de>>(data: &[u8], what: &Path) -> anyhow::Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(data);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("{}: at `{path}`: {}", what.display(), e.into_inner())
    })
}

fn load_config(a: &RunArgs) -> anyhow::Result<SimConfig> {
    let mut cfg: SimConfig = parse_json(&read(&a.config)?, &a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(path) = &a.scenarios {
        let extra: Vec<AdversaryScenario> = parse_json(&read(path)?, path)?;
        cfg.scenarios.extend(extra);
    }
    cfg.validate().with_context(|| a.config.display().to_string())?;
    Ok(cfg)
}

fn cmd_run(a: &RunArgs, attack: bool) -> CmdResult {
    let cfg = load_config(a)?;
    if attack && cfg.scenarios.is_empty() {
        return Err(Fail::Input(anyhow::anyhow!("attack needs at least one scenario (config or --scenarios)")));
    }
    let exec = if a.sequential { Exec::Sequential } else { Exec::default() };
    let run = match run_simulation_with(&cfg, exec) {
        Ok(r) => r,
        Err(e @ (SimError::Config(_) | SimError::UnresolvableTarget { .. } | SimError::Io(_))) => {
            return Err(Fail::Input(e.into()))
        }
        Err(e) => return Err(Fail::Verify(e.to_string())),
    };
    let dir = run.write_outputs(&a.out).map_err(anyhow::Error::from)?;
    let m = &run.metrics;
    println!("run directory: {}", dir.display());
    println!(
        "rounds completed: {}/{}  converged: {}  final accuracy: {}",
        m.rounds_completed,
        m.rounds_planned,
        m.converged,
        m.final_accuracy.map_or("-".into(), |x| format!("{x:.4}"))
    );
    let mut broken = Vec::new();
    for o in &m.attacks {
        let leaks = o.leak_matches.map_or(String::new(), |n| format!(" leaks={n}"));
        println!(
            "attack {:?} r{} {}[{}]: attempted={} detected={} succeeded={}{leaks}",
            o.kind, o.round, o.edge, o.index, o.attempted, o.detected, o.succeeded
        );
        let failed = match o.kind {
            AttackKind::Eavesdrop => o.succeeded > 0 || o.leak_matches.unwrap_or(0) > 0,
            _ => o.succeeded > 0 || o.detected < o.attempted,
        };
        if failed {
            broken.push(format!("{:?} on {} round {}", o.kind, o.edge, o.round));
        }
    }
    if let Some(s) = &m.stall {
        return Err(Fail::Stall(format!("round {} in {:?}, missing {:?}", s.round, s.phase, s.missing)));
    }
    if attack && !broken.is_empty() {
        return Err(Fail::Verify(broken.join(", ")));
    }
    Ok(())
}

fn cmd_ban(a: &BanArgs) -> CmdResult {
    let mut theory = match &a.theory {
        Some(p) => {
            let text = String::from_utf8(read(p)?).map_err(|_| anyhow::anyhow!("{}: not UTF-8", p.display()))?;
            Theory::parse(&text).with_context(|| p.display().to_string())?
        }
        None => Theory::parse(SHIPPED_THEORY).map_err(anyhow::Error::from)?,
    };
    for label in &a.drop_axiom {
        let before = theory.axioms.len();
        theory = theory.without_axiom(label);
        if theory.axioms.len() == before {
            return Err(Fail::Input(anyhow::anyhow!("no axiom labelled {label}")));
        }
    }
    let mut goals = Vec::new();
    if a.all_goals {
        goals.extend(theory.goals.iter().map(|g| (g.label.clone(), g.statement.clone())));
    }
    for g in &a.goal {
        goals.push((g.clone(), theory.goal(g).map_err(anyhow::Error::from)?));
    }
    if goals.is_empty() {
        println!("no goals: nothing to check");
        return Ok(());
    }
    let kb = closed(&theory).map_err(anyhow::Error::from)?;
    let mut failed = Vec::new();
    for (name, goal) in goals {
        match check_goal(&kb, &goal) {
            GoalResult::Derivable(steps) => {
                println!("{name}: derivable  ({goal})");
                for s in steps {
                    println!("  {s}");
                }
            }
            GoalResult::NotDerivable(frontier) => {
                println!("{name}: NOT derivable  ({goal})");
                println!("  missing:");
                for s in frontier {
                    println!("    {s}");
                }
                failed.push(name);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Fail::Verify(format!("underivable goals: {}", failed.join(", "))))
    }
}

#[derive(Deserialize)]
struct RoundRow {
    round: u64,
    status: String,
    txs: u64,
    core_txs: u64,
}

/// Compares each completed round of `rounds.csv` with the block that sealed it.
fn cross_count(blocks: &[Block], rounds: &Path) -> anyhow::Result<Vec<String>> {
    let text = read(rounds)?;
    let mut rdr = csv::Reader::from_reader(text.as_slice());
    let mut problems = Vec::new();
    for row in rdr.deserialize() {
        let row: RoundRow = row.with_context(|| rounds.display().to_string())?;
        if row.status != "completed" {
            continue;
        }
        let height = row.round + 1;
        let Some(b) = blocks.get(height as usize) else {
            problems.push(format!("round {}: block {height} missing", row.round));
            continue;
        };
        let core = b.txs.iter().filter(|t| t.kind.is_core()).count() as u64;
        if core != row.core_txs || b.txs.len() as u64 != row.txs {
            problems.push(format!(
                "round {} (block {height}): csv reports {} txs / {} core, chain holds {} / {core}",
                row.round,
                row.txs,
                row.core_txs,
                b.txs.len()
            ));
        }
    }
    Ok(problems)
}

fn cmd_audit(chain: &Path, rounds: Option<&Path>) -> CmdResult {
    let data = read(chain)?;
    if data.is_empty() {
        return Err(Fail::Input(anyhow::anyhow!("{}: empty chain file", chain.display())));
    }
    let report = audit_export(&data, None);
    let lines = data.split(|&c| c == b'\n').filter(|l| !l.is_empty()).count() as u64;
    println!("blocks verified: {}", report.blocks);
    println!("senders: {}  nonces: {}", report.senders, report.nonces);
    let by_kind: BTreeMap<&str, usize> = report.txs_by_kind.iter().map(|(k, n)| (k.name(), *n)).collect();
    for (k, n) in &by_kind {
        println!("  {k}: {n}");
    }
    if let Some(f) = report.fault {
        // An unparseable final line means the file was cut short, not tampered with.
        let truncated = f.reason == FaultReason::Malformed && f.height + 1 == lines && !data.ends_with(b"\n");
        if truncated {
            return Err(Fail::Input(anyhow::anyhow!("{}: truncated at block {}", chain.display(), f.height)));
        }
        println!("{f}");
        return Err(Fail::Verify(format!("chain fault at block height {} ({})", f.height, f.reason)));
    }
    if let Some(rounds) = rounds {
        let blocks = parse_jsonl(&data, None).map_err(|f| Fail::Verify(f.to_string()))?;
        let problems = cross_count(&blocks, rounds)?;
        for p in &problems {
            println!("{p}");
        }
        if !problems.is_empty() {
            return Err(Fail::Verify(format!("{} rounds disagree with the chain", problems.len())));
        }
        println!("rounds.csv agrees with the chain");
    }
    println!("chain clean");
    Ok(())
}

fn cmd_keygen(a: &KeygenArgs) -> CmdResult {
    let universes = authority_universes(a.n_fogs);
    let Some((id, universe)) = universes.iter().find(|(id, _)| *id == a.authority) else {
        let known: Vec<&str> = universes.iter().map(|(id, _)| *id).collect();
        return Err(Fail::Input(anyhow::anyhow!("unknown authority {:?} (known: {})", a.authority, known.join(", "))));
    };
    let names: Vec<&str> = universe.iter().map(String::as_str).collect();
    let auth = authority_setup(id, &names, &seed_bytes(a.seed, &format!("authority/{id}"))).map_err(anyhow::Error::from)?;
    let attrs: Vec<&str> = a.attrs.iter().map(|s| s.trim()).collect();
    let ring = auth.keygen_user(&a.gid, &attrs, a.epoch).map_err(anyhow::Error::from)?;
    println!("{}", ring.to_json());
    Ok(())
}
