//! A complete deployment: authorities, nodes, ledger, and the round driver.

use std::collections::{BTreeMap, BTreeSet};

use ed25519_dalek::SigningKey;
use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::auth::{authenticate_peer, ChannelKey, Session};
use super::message::{decode_batch, decode_global, encode_batch, encode_global, Body, Edge, Envelope, Header, LocalUpdate};
use super::{
    device_id, fog_id, ms_id, Impostor, Phase, ProtocolError, Rejection, RoundState, Transport, Verdict, CLOUD_ID,
};
use crate::dabe::{dabe_decrypt, dabe_encrypt, AccessPolicy, AuthorityDirectory, DabeCiphertext, UserKeyring};
use crate::dp::{calibrate_sigma, clip_to_norm, gaussian_perturb, DpParams};
use crate::flcore::{data, evaluate, local_train, DataConfig, Dataset, GlobalModel, ModelWeights, TrainingConfig};
use crate::he::{add_vectors, decrypt_vector, encrypt_vector, he_keygen, to_fixed, HeCiphertext, HeKeyPair, HePublicKey, CLIP, SCALE_BITS};
use crate::ledger::{Hash, Ledger, LedgerError, Transaction, TxKind, TxNonce};
use crate::par::{self, Exec};
use crate::smpc::{secure_vector_sum, FieldElement, MERSENNE_127};
use crate::{seed_bytes, seeded_rng};

/// Receiver field of the M4 broadcast.
pub const BROADCAST: &str = "devices";

const EPOCH: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentConfig {
    pub seed: u64,
    pub n_devices: usize,
    pub n_fogs: usize,
    pub n_microservices: usize,
    pub he_bits: u64,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub dp: Option<DpParams>,
    /// Resends allowed for a lost or rejected M2/M3 before the round stalls.
    pub max_retransmits: u32,
    pub exec: Exec,
}

impl Default for DeploymentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_devices: 10,
            n_fogs: 2,
            n_microservices: 2,
            he_bits: 256,
            training: TrainingConfig::default(),
            data: DataConfig::default(),
            dp: None,
            max_retransmits: 2,
            exec: Exec::default(),
        }
    }
}

impl DeploymentConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::Config(m));
        if self.n_fogs == 0 || self.n_microservices == 0 {
            return bad("need at least one fog node and one microservice".into());
        }
        if !crate::he::SUPPORTED_BITS.contains(&self.he_bits) {
            return bad(format!("he_bits must be one of {:?}", crate::he::SUPPORTED_BITS));
        }
        self.training.validate()?;
        self.data.validate()?;
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        Ok(())
    }
}

/// Attribute authorities of a deployment with `n_fogs` fog nodes, and the
/// attributes each one administers.
pub fn authority_universes(n_fogs: usize) -> Vec<(&'static str, Vec<String>)> {
    let mut fog = vec!["fog".to_string()];
    fog.extend((0..n_fogs).map(|f| format!("region-{f}")));
    vec![
        ("auth-iot", vec!["iot".into(), "fl-client".into()]),
        ("auth-fog", fog),
        ("auth-ms", vec!["microservice".into()]),
        ("auth-cloud", vec!["cloud-admin".into()]),
    ]
}

/// DABE policy protecting `edge` when sent to receiver index `to`
/// (M3 is protected by the cloud's Paillier key instead).
pub fn edge_policy(edge: Edge, to: usize) -> Option<String> {
    match edge {
        Edge::M1 => Some(format!("fog AND region-{to}")),
        Edge::M2 => Some("microservice".into()),
        Edge::M3 => None,
        Edge::M4 => Some("fl-client".into()),
    }
}

/// Seed of device `device`'s local training in `round`.
pub fn training_seed(seed: u64, device: usize, round: u64) -> u64 {
    let b = seed_bytes(seed, &format!("train/{device}/{round}"));
    u64::from_be_bytes(b[..8].try_into().unwrap())
}

fn signing_key(seed: u64, id: &str) -> SigningKey {
    SigningKey::from_bytes(&seed_bytes(seed, &format!("sign/{id}")))
}

fn fresh_nonce(rng: &mut impl RngCore) -> TxNonce {
    let mut n = [0u8; 16];
    rng.fill_bytes(&mut n);
    n
}

fn key_event_hash(initiator: &str, responder: &str, round: u64, outcome: &Result<Session, ProtocolError>) -> Hash {
    let mut h = Sha256::new();
    h.update(b"fldabe-keyevent-v1");
    for s in [initiator, responder] {
        h.update((s.len() as u32).to_be_bytes());
        h.update(s);
    }
    h.update(round.to_be_bytes());
    match outcome {
        Ok(s) => {
            h.update([1]);
            h.update(s.transcript);
        }
        Err(_) => h.update([0]),
    }
    h.finalize().into()
}

fn envelope(key: &SigningKey, header: Header, body: Body, now: u64) -> Envelope {
    let ph = Envelope::payload_hash_of(&header, &body);
    let tx = Transaction::signed(body.edge().tx_kind(), &header.sender, ph, header.nonce, now, key);
    Envelope { header, body, tx }
}

struct Policies {
    device_auth: AccessPolicy,
    fog_upload: Vec<AccessPolicy>,
    fog_auth: AccessPolicy,
    microservice: AccessPolicy,
    cloud_auth: AccessPolicy,
    population: AccessPolicy,
}

struct DeviceNode {
    id: String,
    fog: usize,
    keyring: UserKeyring,
    key: SigningKey,
    rng: ChaCha20Rng,
    data: Dataset,
    model: ModelWeights,
    update: Option<ModelWeights>,
    trusts_cloud: bool,
}

struct FogNode {
    id: String,
    ms: usize,
    keyring: UserKeyring,
    key: SigningKey,
    rng: ChaCha20Rng,
    authenticated: BTreeSet<String>,
    batch: Vec<LocalUpdate>,
}

struct MsNode {
    id: String,
    keyring: UserKeyring,
    key: SigningKey,
    rng: ChaCha20Rng,
    authenticated: BTreeSet<String>,
    inbox: Vec<LocalUpdate>,
}

struct CloudNode {
    keyring: UserKeyring,
    key: SigningKey,
    rng: ChaCha20Rng,
    dp_rng: ChaCha20Rng,
    he: HeKeyPair,
    global: GlobalModel,
    authenticated: BTreeSet<String>,
    inbox: BTreeMap<usize, (Vec<HeCiphertext>, u64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Arrival {
    tick: u64,
    seq: usize,
}

/// Outcome of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    /// `None` if the round completed, otherwise where it stopped.
    pub stall: Option<(Phase, Vec<String>)>,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    /// Protocol messages sent by honest nodes (each logged once on the ledger).
    pub messages: u64,
    /// Wire bytes carried, counting a broadcast once per recipient.
    pub bytes: u64,
    pub retransmissions: u64,
    /// Transactions sealed for this round.
    pub txs: u64,
    pub core_txs: u64,
    pub key_events: u64,
    /// Devices whose update entered the aggregate.
    pub participants: usize,
    /// Coordinates clamped by the fixed-point encoder.
    pub clamped: usize,
    /// Tick at which the round finished.
    pub sim_time: u64,
    /// Each M1 sender's weight encoding, for leakage scans.
    pub plaintext_probes: Vec<Vec<u8>>,
}

impl RoundReport {
    fn new(round: u64) -> Self {
        Self {
            round,
            stall: None,
            loss: None,
            accuracy: None,
            messages: 0,
            bytes: 0,
            retransmissions: 0,
            txs: 0,
            core_txs: 0,
            key_events: 0,
            participants: 0,
            clamped: 0,
            sim_time: 0,
            plaintext_probes: Vec::new(),
        }
    }
}

fn stall(state: &RoundState, missing: Vec<String>) -> ProtocolError {
    ProtocolError::Stalled { round: state.round, phase: state.phase, missing }
}

/// Every node of one deployment plus the ledger they share.
pub struct Deployment {
    cfg: DeploymentConfig,
    directory: AuthorityDirectory,
    policies: Policies,
    ledger: Ledger,
    devices: Vec<DeviceNode>,
    fogs: Vec<FogNode>,
    mss: Vec<MsNode>,
    cloud: CloudNode,
    test: Dataset,
    sigma: f64,
    now: u64,
    state: RoundState,
    bootstrapped: bool,
    /// `(receiver, sender, nonce)` of every accepted message.
    consumed: BTreeSet<(String, String, TxNonce)>,
    channel_keys: BTreeMap<(String, String), [u8; 32]>,
    /// Transcript hash of the secure sum, per round, as the microservices computed it.
    transcripts: BTreeMap<u64, Hash>,
    /// `(round, microservice, transcript hash carried in its M3)`.
    m3_log: Vec<(u64, String, Hash)>,
}

impl std::fmt::Debug for Deployment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Deployment").field("config", &self.cfg).field("state", &self.state).finish()
    }
}

impl Deployment {
    pub fn new(cfg: DeploymentConfig) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        let seed = cfg.seed;
        let mut directory = AuthorityDirectory::new();
        for (id, universe) in authority_universes(cfg.n_fogs) {
            let universe: Vec<&str> = universe.iter().map(String::as_str).collect();
            directory.setup_authority(id, &universe, &seed_bytes(seed, &format!("authority/{id}")))?;
        }
        let policies = Policies {
            device_auth: directory.parse_policy("iot AND fl-client")?,
            fog_upload: (0..cfg.n_fogs)
                .map(|f| directory.parse_policy(&edge_policy(Edge::M1, f).expect("DABE edge")))
                .collect::<Result<_, _>>()?,
            fog_auth: directory.parse_policy("fog")?,
            microservice: directory.parse_policy(&edge_policy(Edge::M2, 0).expect("DABE edge"))?,
            cloud_auth: directory.parse_policy("cloud-admin")?,
            population: directory.parse_policy(&edge_policy(Edge::M4, 0).expect("DABE edge"))?,
        };
        let regions: Vec<String> = (0..cfg.n_fogs).map(|f| format!("region-{f}")).collect();
        let issue = |auth: &str, gid: &str, attrs: &[&str]| {
            directory.authority(auth).expect("set up above").keygen_user(gid, attrs, EPOCH)
        };

        let mut ledger = Ledger::new(signing_key(seed, "sealer"));
        let d = ModelWeights::dim_for(cfg.data.features);
        let mut devices = Vec::with_capacity(cfg.n_devices);
        for k in 0..cfg.n_devices {
            let id = device_id(k);
            devices.push(DeviceNode {
                fog: k % cfg.n_fogs,
                keyring: issue("auth-iot", &id, &["iot", "fl-client"])?,
                key: signing_key(seed, &id),
                rng: seeded_rng(seed, &format!("node/{id}")),
                data: data::generate_device(&cfg.data, seed, k),
                model: ModelWeights::zeros(d),
                update: None,
                trusts_cloud: false,
                id,
            });
        }
        let mut fogs = Vec::with_capacity(cfg.n_fogs);
        for (f, region) in regions.iter().enumerate() {
            let id = fog_id(f);
            fogs.push(FogNode {
                ms: f % cfg.n_microservices,
                keyring: issue("auth-fog", &id, &["fog", region])?,
                key: signing_key(seed, &id),
                rng: seeded_rng(seed, &format!("node/{id}")),
                authenticated: BTreeSet::new(),
                batch: Vec::new(),
                id,
            });
        }
        let mut mss = Vec::with_capacity(cfg.n_microservices);
        for m in 0..cfg.n_microservices {
            let id = ms_id(m);
            mss.push(MsNode {
                keyring: issue("auth-ms", &id, &["microservice"])?,
                key: signing_key(seed, &id),
                rng: seeded_rng(seed, &format!("node/{id}")),
                authenticated: BTreeSet::new(),
                inbox: Vec::new(),
                id,
            });
        }
        let he = he_keygen(cfg.he_bits, &mut seeded_rng(seed, "he/cloud"))?;
        let cloud = CloudNode {
            keyring: issue("auth-cloud", CLOUD_ID, &["cloud-admin"])?,
            key: signing_key(seed, CLOUD_ID),
            rng: seeded_rng(seed, "node/cloud"),
            dp_rng: seeded_rng(seed, "dp/cloud"),
            he,
            global: GlobalModel::new(ModelWeights::zeros(d)),
            authenticated: BTreeSet::new(),
            inbox: BTreeMap::new(),
        };

        for (id, key) in devices
            .iter()
            .map(|n| (&n.id, &n.key))
            .chain(fogs.iter().map(|n| (&n.id, &n.key)))
            .chain(mss.iter().map(|n| (&n.id, &n.key)))
        {
            ledger.register(id, key.verifying_key())?;
        }
        ledger.register(CLOUD_ID, cloud.key.verifying_key())?;

        let sigma = match &cfg.dp {
            Some(dp) => calibrate_sigma(dp)?,
            None => 0.0,
        };
        let mut channel_keys = BTreeMap::new();
        // The cloud-ledger channel is fixed by the cloud's registration.
        let mut h = Sha256::new();
        h.update(b"fldabe-channel-cb");
        h.update(cloud.key.verifying_key().as_bytes());
        h.update(ledger.sealer_key().as_bytes());
        channel_keys.insert((CLOUD_ID.to_string(), "sealer".to_string()), h.finalize().into());

        Ok(Self {
            test: data::generate_test(&cfg.data, seed),
            cfg,
            directory,
            policies,
            ledger,
            devices,
            fogs,
            mss,
            cloud,
            sigma,
            now: 0,
            state: RoundState { round: 0, phase: Phase::Done, pending: Vec::new() },
            bootstrapped: false,
            consumed: BTreeSet::new(),
            channel_keys,
            transcripts: BTreeMap::new(),
            m3_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &DeploymentConfig {
        &self.cfg
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn directory(&self) -> &AuthorityDirectory {
        &self.directory
    }

    pub fn global(&self) -> &GlobalModel {
        &self.cloud.global
    }

    pub fn he_public(&self) -> &HePublicKey {
        &self.cloud.he.public
    }

    pub fn device_model(&self, k: usize) -> &ModelWeights {
        &self.devices[k].model
    }

    pub fn device_data(&self, k: usize) -> &Dataset {
        &self.devices[k].data
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    /// Gaussian noise scale applied at the cloud (0 without DP).
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Channel keys established so far (latest session per pair).
    pub fn channel_keys(&self) -> Vec<ChannelKey> {
        self.channel_keys.iter().map(|((a, b), k)| ChannelKey { pair: (a.clone(), b.clone()), key: *k }).collect()
    }

    /// Number of M2 messages a full round sends (fogs with at least one device).
    pub fn active_fogs(&self) -> usize {
        (0..self.fogs.len()).filter(|f| self.devices.iter().any(|d| d.fog == *f)).count()
    }

    /// Drops attribute `name` from a node's keyring, as a revocation would.
    pub fn revoke_attribute(&mut self, node: &str, name: &str) -> bool {
        let kr = if let Some(d) = self.devices.iter_mut().find(|d| d.id == node) {
            &mut d.keyring
        } else if let Some(f) = self.fogs.iter_mut().find(|f| f.id == node) {
            &mut f.keyring
        } else if let Some(m) = self.mss.iter_mut().find(|m| m.id == node) {
            &mut m.keyring
        } else if node == CLOUD_ID {
            &mut self.cloud.keyring
        } else {
            return false;
        };
        let before = kr.len();
        *kr = std::mem::replace(kr, UserKeyring::empty(node, EPOCH)).without(name);
        kr.len() < before
    }

    /// Microservices whose M3 in `round` carried a transcript hash different
    /// from the one recomputed over the secure-sum transcript.
    pub fn audit_aggregation(&self, round: u64) -> Vec<String> {
        let expected = self.transcripts.get(&round).copied().unwrap_or([0; 32]);
        self.m3_log
            .iter()
            .filter(|(r, _, h)| *r == round && *h != expected)
            .map(|(_, id, _)| id.clone())
            .collect()
    }

    #[doc(hidden)]
    pub fn transcripts_mut(&mut self) -> &mut BTreeMap<u64, Hash> {
        &mut self.transcripts
    }

    fn key_event(
        ledger: &mut Ledger,
        responder: (&str, &SigningKey, &mut ChaCha20Rng),
        initiator: &str,
        round: u64,
        outcome: &Result<Session, ProtocolError>,
        now: u64,
    ) -> Result<(), LedgerError> {
        let (id, key, rng) = responder;
        let ph = key_event_hash(initiator, id, round, outcome);
        let tx = Transaction::signed(TxKind::KeyEvent, id, ph, fresh_nonce(rng), now, key);
        ledger.submit_transaction(tx)
    }

    /// Logs the envelope's transaction and hands it to the transport. Returns
    /// `None` when the ledger refuses the transaction (the message is not sent).
    fn dispatch(
        &mut self,
        env: Envelope,
        to: &[String],
        transport: &mut dyn Transport,
        report: &mut RoundReport,
        inbox: &mut Vec<(Arrival, String, Envelope)>,
    ) -> bool {
        if self.ledger.submit_transaction(env.tx.clone()).is_err() {
            return false;
        }
        report.messages += 1;
        let len = env.to_bytes().len() as u64;
        for r in to {
            report.bytes += len;
            for (tick, e) in transport.carry(&env, r, self.now) {
                let seq = inbox.len();
                inbox.push((Arrival { tick, seq }, r.clone(), e));
            }
        }
        true
    }

    fn settle(&mut self, inbox: &mut [(Arrival, String, Envelope)]) {
        inbox.sort_by_key(|(a, _, _)| (a.tick, a.seq));
        if let Some((a, _, _)) = inbox.last() {
            self.now = self.now.max(a.tick);
        }
    }

    /// Checks shared by every receiver before any decryption.
    fn precheck(&self, to: &str, env: &Envelope, round: u64, edge: Edge) -> Result<(), Rejection> {
        let broadcast_ok = env.header.receiver == BROADCAST && self.devices.iter().any(|d| d.id == to);
        if env.header.receiver != to && !broadcast_ok {
            return Err(Rejection::WrongReceiver);
        }
        if env.edge() != edge {
            return Err(Rejection::WrongEdge);
        }
        if env.header.round != round {
            return Err(Rejection::WrongRound);
        }
        let logged = self.ledger.find(&env.header.sender, &env.header.nonce).ok_or(Rejection::NoTransaction)?;
        if logged.kind != edge.tx_kind() {
            return Err(Rejection::TxMismatch);
        }
        if self.consumed.contains(&(to.to_string(), env.header.sender.clone(), env.header.nonce)) {
            return Err(Rejection::Replay);
        }
        Ok(())
    }

    fn payload_matches(&self, env: &Envelope) -> Result<(), Rejection> {
        let logged = self.ledger.find(&env.header.sender, &env.header.nonce).ok_or(Rejection::NoTransaction)?;
        if logged.payload_hash != env.payload_hash() {
            return Err(Rejection::TxMismatch);
        }
        Ok(())
    }

    fn open(ct: Option<&DabeCiphertext>, keyring: &UserKeyring) -> Result<Vec<u8>, Rejection> {
        let ct = ct.ok_or(Rejection::WrongEdge)?;
        dabe_decrypt(ct, keyring).map_err(Rejection::Decryption)
    }

    fn consume(&mut self, to: &str, env: &Envelope) {
        self.consumed.insert((to.to_string(), env.header.sender.clone(), env.header.nonce));
    }

    fn model_dim(&self) -> usize {
        ModelWeights::dim_for(self.cfg.data.features)
    }

    /// Round 0: the cloud distributes the initial model to every device.
    pub fn bootstrap(&mut self, transport: &mut dyn Transport) -> Result<RoundReport, ProtocolError> {
        if self.bootstrapped {
            return Err(ProtocolError::Config("deployment already bootstrapped".into()));
        }
        self.bootstrapped = true;
        self.state = RoundState { round: 0, phase: Phase::Distribute, pending: Vec::new() };
        let mut report = RoundReport::new(0);
        let res = self.broadcast(0, transport, &mut report);
        self.finish_round(report, res)
    }

    /// Runs one full round. Stalls are reported in the returned report;
    /// errors are reserved for misconfiguration and cryptographic failures.
    pub fn run_round(&mut self, transport: &mut dyn Transport) -> Result<RoundReport, ProtocolError> {
        if self.devices.is_empty() {
            return Err(ProtocolError::NoDevices);
        }
        if !self.bootstrapped {
            self.bootstrap(transport)?;
        }
        let round = self.cloud.global.round + 1;
        self.state = RoundState { round, phase: Phase::Distribute, pending: Vec::new() };
        let mut report = RoundReport::new(round);
        let res = self.round_phases(round, transport, &mut report);
        self.finish_round(report, res)
    }

    fn finish_round(
        &mut self,
        mut report: RoundReport,
        res: Result<(), ProtocolError>,
    ) -> Result<RoundReport, ProtocolError> {
        match res {
            Ok(()) => self.state.advance(Phase::Done),
            Err(ProtocolError::Stalled { phase, missing, .. }) => {
                self.state.pending = missing.clone();
                report.stall = Some((phase, missing));
            }
            Err(e) => return Err(e),
        }
        if !self.ledger.pending().is_empty() && self.ledger.is_online() {
            let block = self.ledger.seal_block()?;
            report.txs = block.txs.len() as u64;
            report.core_txs = block.txs.iter().filter(|t| t.kind.is_core()).count() as u64;
            report.key_events = report.txs - report.core_txs;
        }
        report.sim_time = self.now;
        Ok(report)
    }

    fn round_phases(
        &mut self,
        round: u64,
        transport: &mut dyn Transport,
        report: &mut RoundReport,
    ) -> Result<(), ProtocolError> {
        for f in &mut self.fogs {
            f.authenticated.clear();
            f.batch.clear();
        }
        for m in &mut self.mss {
            m.authenticated.clear();
            m.inbox.clear();
        }
        self.cloud.authenticated.clear();
        self.cloud.inbox.clear();

        self.state.advance(Phase::LocalTrain);
        self.local_train(round)?;

        self.state.advance(Phase::Upload);
        self.upload(round, transport, report)?;

        self.state.advance(Phase::FogAggregate);
        self.forward(round, transport, report)?;

        self.state.advance(Phase::CloudAggregate);
        self.aggregate(round, transport, report)?;

        self.state.advance(Phase::Broadcast);
        self.broadcast(round, transport, report)
    }

    fn local_train(&mut self, round: u64) -> Result<(), ProtocolError> {
        let seed = self.cfg.seed;
        let jobs: Vec<(&ModelWeights, &Dataset, TrainingConfig)> = self
            .devices
            .iter()
            .enumerate()
            .map(|(k, d)| (&d.model, &d.data, TrainingConfig { seed: training_seed(seed, k, round), ..self.cfg.training }))
            .collect();
        let trained = par::map(self.cfg.exec, &jobs, |(w, d, c)| local_train(w, d, c));
        let clip = self.cfg.dp.map(|dp| dp.clip_norm);
        for (dev, t) in self.devices.iter_mut().zip(trained) {
            let t = t?;
            dev.update = Some(match clip {
                Some(c) => {
                    let delta: Vec<f64> = t.values.iter().zip(&dev.model.values).map(|(a, b)| a - b).collect();
                    let clipped = clip_to_norm(&delta, c);
                    ModelWeights::new(dev.model.values.iter().zip(&clipped).map(|(b, d)| b + d).collect())
                }
                None => t,
            });
        }
        Ok(())
    }

    fn upload(&mut self, round: u64, transport: &mut dyn Transport, report: &mut RoundReport) -> Result<(), ProtocolError> {
        let now = self.now;
        // Devices prove their attributes to their fog node.
        for k in 0..self.devices.len() {
            let dev = &self.devices[k];
            let fog = &mut self.fogs[dev.fog];
            let outcome = authenticate_peer(&dev.keyring, &self.policies.device_auth, &self.directory, &mut fog.rng);
            Self::key_event(&mut self.ledger, (&fog.id, &fog.key, &mut fog.rng), &dev.id, round, &outcome, now)
                .map_err(|_| stall(&self.state, vec![format!("KeyEvent {} -> {}", dev.id, fog.id)]))?;
            if let Ok(s) = outcome {
                fog.authenticated.insert(dev.id.clone());
                self.channel_keys.insert((dev.id.clone(), fog.id.clone()), s.channel_key(&dev.id, &fog.id));
            }
        }

        let mut inbox = Vec::new();
        for k in 0..self.devices.len() {
            let dev = &self.devices[k];
            if !self.fogs[dev.fog].authenticated.contains(&dev.id) {
                continue;
            }
            let Some(update) = &dev.update else { continue };
            let mut fixed = Vec::with_capacity(update.dim());
            for v in &update.values {
                let (q, clamped) = to_fixed(*v, SCALE_BITS, CLIP);
                report.clamped += usize::from(clamped);
                fixed.push(q);
            }
            let upd = LocalUpdate { device: dev.id.clone(), round, samples: dev.data.len() as u64, fixed };
            report.plaintext_probes.push(upd.weight_bytes());
            let f = dev.fog;
            let dev = &mut self.devices[k];
            let ct = dabe_encrypt(&upd.to_bytes(), &self.policies.fog_upload[f], &self.directory, EPOCH, &mut dev.rng)?;
            let header = Header { sender: dev.id.clone(), receiver: fog_id(f), round, nonce: fresh_nonce(&mut dev.rng) };
            let env = envelope(&dev.key, header, Body::M1 { ct }, now);
            self.dispatch(env, &[fog_id(f)], transport, report, &mut inbox);
        }

        let impostors = transport.impostors(round);
        let mut impostor_nonces = Vec::new();
        for imp in &impostors {
            let env = self.impostor_attempt(imp, round, transport, &mut inbox)?;
            impostor_nonces.push(env);
        }

        for (to, tick, env) in transport.inject(round, Edge::M1, &mut self.ledger, now) {
            let seq = inbox.len();
            inbox.push((Arrival { tick, seq }, to, env));
        }
        self.settle(&mut inbox);

        let mut accepted_nonces = BTreeSet::new();
        for (_, to, env) in &inbox {
            let verdict = match self.receive_m1(to, env, round) {
                Ok(()) => {
                    accepted_nonces.insert(env.header.nonce);
                    Verdict::Accepted
                }
                Err(r) => Verdict::Rejected(r),
            };
            transport.verdict(to, env, &verdict);
        }
        for (imp, (auth_ok, nonce)) in impostors.iter().zip(impostor_nonces) {
            let accepted = accepted_nonces.contains(&nonce);
            transport.impostor_outcome(imp, !auth_ok && !accepted, accepted);
        }

        report.participants = self.fogs.iter().map(|f| f.batch.len()).sum();
        if report.participants == 0 {
            let missing = self.devices.iter().map(|d| format!("M1 {} -> {}", d.id, fog_id(d.fog))).collect();
            return Err(stall(&self.state, missing));
        }
        Ok(())
    }

    /// An impostor authenticates (and fails), then pushes an M1 anyway.
    /// Returns whether authentication passed and the nonce of its M1.
    fn impostor_attempt(
        &mut self,
        imp: &Impostor,
        round: u64,
        transport: &mut dyn Transport,
        inbox: &mut Vec<(Arrival, String, Envelope)>,
    ) -> Result<(bool, TxNonce), ProtocolError> {
        let f = imp.fog.min(self.fogs.len() - 1);
        let attrs: Vec<&str> = imp.attrs.iter().map(String::as_str).collect();
        let keyring = self
            .directory
            .authority("auth-iot")
            .expect("set up in new")
            .keygen_user(&imp.claimed_id, &attrs, EPOCH)?;
        let fog = &mut self.fogs[f];
        let outcome = authenticate_peer(&keyring, &self.policies.device_auth, &self.directory, &mut fog.rng);
        let auth_ok = outcome.is_ok();
        Self::key_event(&mut self.ledger, (&fog.id, &fog.key, &mut fog.rng), &imp.claimed_id, round, &outcome, self.now)
            .map_err(|_| stall(&self.state, vec![format!("KeyEvent {} -> {}", imp.claimed_id, fog.id)]))?;

        let mut rng = seeded_rng(self.cfg.seed, &format!("impostor/{}/{round}", imp.claimed_id));
        let key = SigningKey::from_bytes(&seed_bytes(self.cfg.seed, &format!("impostor/{}", imp.claimed_id)));
        let fixed = (0..self.model_dim()).map(|_| rng.gen_range(-65536..65536)).collect();
        let upd = LocalUpdate { device: imp.claimed_id.clone(), round, samples: 1000, fixed };
        let ct = dabe_encrypt(&upd.to_bytes(), &self.policies.fog_upload[f], &self.directory, EPOCH, &mut rng)?;
        let header = Header { sender: imp.claimed_id.clone(), receiver: fog_id(f), round, nonce: fresh_nonce(&mut rng) };
        let env = envelope(&key, header, Body::M1 { ct }, self.now);
        let nonce = env.header.nonce;
        // The ledger refuses the impostor's transaction; the envelope still goes out.
        let _ = self.ledger.submit_transaction(env.tx.clone());
        for (tick, e) in transport.carry(&env, &fog_id(f), self.now) {
            let seq = inbox.len();
            inbox.push((Arrival { tick, seq }, fog_id(f), e));
        }
        Ok((auth_ok, nonce))
    }

    fn receive_m1(&mut self, to: &str, env: &Envelope, round: u64) -> Result<(), Rejection> {
        self.precheck(to, env, round, Edge::M1)?;
        let f = self.fogs.iter().position(|f| f.id == to).ok_or(Rejection::WrongReceiver)?;
        if !self.fogs[f].authenticated.contains(&env.header.sender) {
            return Err(Rejection::Unauthenticated);
        }
        let plain = Self::open(env.body.dabe(), &self.fogs[f].keyring)?;
        self.payload_matches(env)?;
        let upd = LocalUpdate::from_bytes(&plain).map_err(|e| Rejection::Malformed(e.to_string()))?;
        if upd.device != env.header.sender || upd.round != round || upd.fixed.len() != self.model_dim() {
            return Err(Rejection::Malformed("update does not match its envelope".into()));
        }
        if self.fogs[f].batch.iter().any(|u| u.device == upd.device) {
            return Err(Rejection::Replay);
        }
        self.fogs[f].batch.push(upd);
        self.consume(to, env);
        Ok(())
    }

    fn forward(&mut self, round: u64, transport: &mut dyn Transport, report: &mut RoundReport) -> Result<(), ProtocolError> {
        let mut pending = BTreeSet::new();
        for f in 0..self.fogs.len() {
            if self.fogs[f].batch.is_empty() {
                continue;
            }
            let fog = &self.fogs[f];
            let ms = &mut self.mss[fog.ms];
            let outcome = authenticate_peer(&fog.keyring, &self.policies.fog_auth, &self.directory, &mut ms.rng);
            Self::key_event(&mut self.ledger, (&ms.id, &ms.key, &mut ms.rng), &fog.id, round, &outcome, self.now)
                .map_err(|_| stall(&self.state, vec![format!("KeyEvent {} -> {}", fog.id, ms.id)]))?;
            if let Ok(s) = outcome {
                ms.authenticated.insert(fog.id.clone());
                self.channel_keys.insert((fog.id.clone(), ms.id.clone()), s.channel_key(&fog.id, &ms.id));
            }
            pending.insert(f);
        }

        for attempt in 0..=self.cfg.max_retransmits {
            if pending.is_empty() {
                break;
            }
            let now = self.now;
            let mut inbox = Vec::new();
            for &f in &pending {
                let fog = &mut self.fogs[f];
                let to = ms_id(fog.ms);
                let ct = dabe_encrypt(&encode_batch(&fog.batch), &self.policies.microservice, &self.directory, EPOCH, &mut fog.rng)?;
                let header = Header { sender: fog.id.clone(), receiver: to.clone(), round, nonce: fresh_nonce(&mut fog.rng) };
                let env = envelope(&fog.key, header, Body::M2 { ct }, now);
                if self.dispatch(env, &[to], transport, report, &mut inbox) && attempt > 0 {
                    report.retransmissions += 1;
                }
            }
            if attempt == 0 {
                for (to, tick, env) in transport.inject(round, Edge::M2, &mut self.ledger, now) {
                    let seq = inbox.len();
                    inbox.push((Arrival { tick, seq }, to, env));
                }
            }
            self.settle(&mut inbox);
            for (_, to, env) in &inbox {
                let verdict = match self.receive_m2(to, env, round) {
                    Ok(()) => {
                        if let Some(f) = self.fogs.iter().position(|f| f.id == env.header.sender) {
                            pending.remove(&f);
                        }
                        Verdict::Accepted
                    }
                    Err(r) => Verdict::Rejected(r),
                };
                transport.verdict(to, env, &verdict);
            }
        }
        if !pending.is_empty() {
            let missing = pending.iter().map(|&f| format!("M2 {} -> {}", fog_id(f), ms_id(self.fogs[f].ms))).collect();
            return Err(stall(&self.state, missing));
        }
        Ok(())
    }

    fn receive_m2(&mut self, to: &str, env: &Envelope, round: u64) -> Result<(), Rejection> {
        self.precheck(to, env, round, Edge::M2)?;
        let m = self.mss.iter().position(|m| m.id == to).ok_or(Rejection::WrongReceiver)?;
        let f = self.fogs.iter().position(|f| f.id == env.header.sender).ok_or(Rejection::Unauthenticated)?;
        if !self.mss[m].authenticated.contains(&env.header.sender) {
            return Err(Rejection::Unauthenticated);
        }
        let plain = Self::open(env.body.dabe(), &self.mss[m].keyring)?;
        self.payload_matches(env)?;
        let batch = decode_batch(&plain).map_err(|e| Rejection::Malformed(e.to_string()))?;
        let d = self.model_dim();
        let consistent = !batch.is_empty()
            && batch.iter().all(|u| {
                u.round == round
                    && u.fixed.len() == d
                    && self.devices.iter().any(|dev| dev.id == u.device && dev.fog == f)
            });
        if !consistent {
            return Err(Rejection::Malformed("batch does not match the forwarding fog".into()));
        }
        self.mss[m].inbox.extend(batch);
        self.consume(to, env);
        Ok(())
    }

    fn aggregate(&mut self, round: u64, transport: &mut dyn Transport, report: &mut RoundReport) -> Result<(), ProtocolError> {
        for m in 0..self.mss.len() {
            let ms = &self.mss[m];
            let cloud = &mut self.cloud;
            let outcome = authenticate_peer(&ms.keyring, &self.policies.microservice, &self.directory, &mut cloud.rng);
            Self::key_event(&mut self.ledger, (CLOUD_ID, &cloud.key, &mut cloud.rng), &ms.id, round, &outcome, self.now)
                .map_err(|_| stall(&self.state, vec![format!("KeyEvent {} -> {CLOUD_ID}", ms.id)]))?;
            if let Ok(s) = outcome {
                cloud.authenticated.insert(ms.id.clone());
                self.channel_keys.insert((ms.id.clone(), CLOUD_ID.to_string()), s.channel_key(&ms.id, CLOUD_ID));
            }
        }

        // Each microservice's weighted numerator sum_k n_k * fixed(w_k), and its sample count.
        let d = self.model_dim();
        let mut numerators = Vec::with_capacity(self.mss.len());
        let mut counts = Vec::with_capacity(self.mss.len());
        for ms in &self.mss {
            let mut acc = vec![0i128; d];
            for u in &ms.inbox {
                for (a, q) in acc.iter_mut().zip(&u.fixed) {
                    *a += u.samples as i128 * *q as i128;
                }
            }
            numerators.push(acc.into_iter().map(FieldElement::from_i128).collect::<Vec<_>>());
            counts.push(ms.inbox.iter().map(|u| u.samples).sum::<u64>());
        }
        let (shares, transcript_hash) = if self.mss.len() >= 2 {
            let mut rng = seeded_rng(self.cfg.seed, &format!("smpc/{round}"));
            let sum = secure_vector_sum(&numerators, self.mss.len(), &mut rng)?;
            (sum.partials, sum.transcript.hash())
        } else {
            (numerators, [0u8; 32])
        };
        self.transcripts.insert(round, transcript_hash);

        let mut pending: BTreeSet<usize> = (0..self.mss.len()).collect();
        for attempt in 0..=self.cfg.max_retransmits {
            if pending.is_empty() {
                break;
            }
            let now = self.now;
            let mut inbox = Vec::new();
            for &m in &pending {
                let ms = &mut self.mss[m];
                let values: Vec<BigUint> = shares[m].iter().map(|x| BigUint::from(x.value())).collect();
                let cts = encrypt_vector(&self.cloud.he.public, &values, &mut ms.rng, self.cfg.exec)?;
                let header = Header { sender: ms.id.clone(), receiver: CLOUD_ID.into(), round, nonce: fresh_nonce(&mut ms.rng) };
                let body = Body::M3 { cts, transcript_hash, sample_count: counts[m] };
                let env = envelope(&ms.key, header, body, now);
                if self.dispatch(env, &[CLOUD_ID.to_string()], transport, report, &mut inbox) && attempt > 0 {
                    report.retransmissions += 1;
                }
            }
            if attempt == 0 {
                for (to, tick, env) in transport.inject(round, Edge::M3, &mut self.ledger, now) {
                    let seq = inbox.len();
                    inbox.push((Arrival { tick, seq }, to, env));
                }
            }
            self.settle(&mut inbox);
            for (_, to, env) in &inbox {
                let verdict = match self.receive_m3(to, env, round) {
                    Ok(m) => {
                        pending.remove(&m);
                        Verdict::Accepted
                    }
                    Err(r) => Verdict::Rejected(r),
                };
                transport.verdict(to, env, &verdict);
            }
        }
        if !pending.is_empty() {
            let missing = pending.iter().map(|&m| format!("M3 {} -> {CLOUD_ID}", ms_id(m))).collect();
            return Err(stall(&self.state, missing));
        }

        // Sum the encrypted shares, decrypt once, and undo the field embedding.
        let pk = &self.cloud.he.public;
        let mut total: Option<Vec<HeCiphertext>> = None;
        let mut samples = 0u64;
        for (cts, n) in self.cloud.inbox.values() {
            samples += n;
            total = Some(match total {
                None => cts.clone(),
                Some(t) => add_vectors(pk, &t, cts)?,
            });
        }
        if samples == 0 {
            return Err(stall(&self.state, vec!["aggregate with zero samples".into()]));
        }
        let plain = decrypt_vector(&self.cloud.he, &total.expect("n_microservices >= 1"), self.cfg.exec)?;
        let p = BigUint::from(MERSENNE_127);
        let scale = samples as f64 * (1u64 << SCALE_BITS) as f64;
        let avg: Vec<f64> = plain
            .iter()
            .map(|v| {
                let r = (v % &p).to_u128().expect("reduced below 2^127");
                FieldElement::new(r).to_i128() as f64 / scale
            })
            .collect();
        let noisy = gaussian_perturb(&avg, self.sigma, &mut self.cloud.dp_rng)?;
        let w = ModelWeights::new(noisy);
        let (loss, acc) = evaluate(&w, &self.test)?;
        self.cloud.global.advance(w, loss, acc);
        report.loss = Some(loss);
        report.accuracy = Some(acc);
        Ok(())
    }

    fn receive_m3(&mut self, to: &str, env: &Envelope, round: u64) -> Result<usize, Rejection> {
        self.precheck(to, env, round, Edge::M3)?;
        if to != CLOUD_ID {
            return Err(Rejection::WrongReceiver);
        }
        let m = self.mss.iter().position(|m| m.id == env.header.sender).ok_or(Rejection::Unauthenticated)?;
        if !self.cloud.authenticated.contains(&env.header.sender) {
            return Err(Rejection::Unauthenticated);
        }
        self.payload_matches(env)?;
        let Body::M3 { cts, transcript_hash, sample_count } = &env.body else {
            return Err(Rejection::WrongEdge);
        };
        let fp = self.cloud.he.public.fingerprint();
        if cts.len() != self.model_dim() || cts.iter().any(|c| c.fingerprint != fp) {
            return Err(Rejection::Malformed("ciphertext vector does not fit the cloud key".into()));
        }
        if self.cloud.inbox.contains_key(&m) {
            return Err(Rejection::Replay);
        }
        self.cloud.inbox.insert(m, (cts.clone(), *sample_count));
        self.m3_log.push((round, env.header.sender.clone(), *transcript_hash));
        self.consume(to, env);
        Ok(m)
    }

    fn broadcast(&mut self, round: u64, transport: &mut dyn Transport, report: &mut RoundReport) -> Result<(), ProtocolError> {
        let now = self.now;
        // Devices challenge the cloud before accepting a model from it.
        for dev in &mut self.devices {
            let outcome = authenticate_peer(&self.cloud.keyring, &self.policies.cloud_auth, &self.directory, &mut dev.rng);
            Self::key_event(&mut self.ledger, (&dev.id, &dev.key, &mut dev.rng), CLOUD_ID, round, &outcome, now)
                .map_err(|_| stall(&self.state, vec![format!("KeyEvent {CLOUD_ID} -> {}", dev.id)]))?;
            dev.trusts_cloud = outcome.is_ok();
            if let Ok(s) = outcome {
                self.channel_keys.insert((CLOUD_ID.to_string(), dev.id.clone()), s.channel_key(CLOUD_ID, &dev.id));
            }
        }

        let payload = encode_global(round, &self.cloud.global.weights.values);
        let ct = dabe_encrypt(&payload, &self.policies.population, &self.directory, EPOCH, &mut self.cloud.rng)?;
        let header = Header { sender: CLOUD_ID.into(), receiver: BROADCAST.into(), round, nonce: fresh_nonce(&mut self.cloud.rng) };
        let env = envelope(&self.cloud.key, header, Body::M4 { ct }, now);
        let recipients: Vec<String> = self.devices.iter().map(|d| d.id.clone()).collect();
        let mut inbox = Vec::new();
        if !self.dispatch(env, &recipients, transport, report, &mut inbox) {
            return Err(stall(&self.state, vec![format!("M4 {CLOUD_ID} -> {BROADCAST}")]));
        }
        for (to, tick, env) in transport.inject(round, Edge::M4, &mut self.ledger, now) {
            let seq = inbox.len();
            inbox.push((Arrival { tick, seq }, to, env));
        }
        self.settle(&mut inbox);
        for (_, to, env) in &inbox {
            let verdict = match self.receive_m4(to, env, round) {
                Ok(()) => Verdict::Accepted,
                Err(r) => Verdict::Rejected(r),
            };
            transport.verdict(to, env, &verdict);
        }
        Ok(())
    }

    fn receive_m4(&mut self, to: &str, env: &Envelope, round: u64) -> Result<(), Rejection> {
        self.precheck(to, env, round, Edge::M4)?;
        let k = self.devices.iter().position(|d| d.id == to).ok_or(Rejection::WrongReceiver)?;
        if env.header.sender != CLOUD_ID || !self.devices[k].trusts_cloud {
            return Err(Rejection::Unauthenticated);
        }
        let plain = Self::open(env.body.dabe(), &self.devices[k].keyring)?;
        self.payload_matches(env)?;
        let (r, w) = decode_global(&plain).map_err(|e| Rejection::Malformed(e.to_string()))?;
        if r != round || w.len() != self.model_dim() {
            return Err(Rejection::Malformed("global model does not match its envelope".into()));
        }
        self.devices[k].model = ModelWeights::new(w);
        self.consume(to, env);
        Ok(())
    }
}
