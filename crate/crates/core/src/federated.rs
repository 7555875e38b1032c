//! Federated averaging over a message transport.
//!
//! Session flow, as seen by the server:
//!
//! ```text
//! Join(spec, I)          -> Joined | Abort        policy check at each station
//! BoundsRequest          -> BoundsReply           optional
//! Broadcast(0, w0)       -> LocalUpdate(1, ..)
//! Broadcast(r, w̄r)      -> LocalUpdate(r+1, ..)  for r < I
//! Broadcast(I, w̄I)      -> Evaluation(I, ..)
//! Finish
//! ```
//!
//! A local-only session replaces the broadcasts with a single
//! `LocalOnly -> Evaluation` exchange, so no weights travel at all.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path::normalize;
use crate::projection::{Encoding, ProjectionSpec};
use crate::survival::{
    c_statistic, predict, train_local, ModelWeights, NormalizationBounds, SurvivalBatch, SurvivalError, TrainingConfig,
};

pub const DEFAULT_ROUNDS: u32 = 20;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
const MAX_FRAME: usize = 1 << 28;

pub type ClientId = u32;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("client {client} aborted in round {round}: {reason}")]
    Abort { round: u32, client: String, reason: String },
    #[error("timed out waiting for client {client} in round {round}")]
    Timeout { round: u32, client: ClientId },
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn protocol(msg: impl Into<String>) -> FedError {
    FedError::Protocol(msg.into())
}

// --- Aggregation --------------------------------------------------------------

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Adds `b` to a nonoverlapping expansion (increasing magnitude), exactly.
fn grow(e: &mut Vec<f64>, b: f64) {
    let mut q = b;
    let mut out = Vec::with_capacity(e.len() + 1);
    for &x in e.iter() {
        let (s, err) = two_sum(q, x);
        if err != 0.0 {
            out.push(err);
        }
        q = s;
    }
    if q != 0.0 || out.is_empty() {
        out.push(q);
    }
    *e = out;
}

fn estimate(e: &[f64]) -> f64 {
    e.iter().sum()
}

/// Exact value of `e - c * n`, `n` a positive integer.
fn residual(e: &[f64], c: f64, n: f64) -> Vec<f64> {
    let (hi, lo) = two_prod(c, n);
    let mut r = e.to_vec();
    grow(&mut r, -hi);
    grow(&mut r, -lo);
    r
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

/// Round-to-nearest-even of `exact / n`.
fn divide_rounded(exact: &[f64], n: f64) -> f64 {
    let q = estimate(exact) / n;
    let mut candidates = vec![q];
    for _ in 0..3 {
        candidates.insert(0, next_down(candidates[0]));
        let last = *candidates.last().expect("non-empty");
        candidates.push(next_up(last));
    }
    let scored: Vec<(f64, Vec<f64>)> = candidates.into_iter().map(|c| (c, residual(exact, c, n))).collect();
    let best = scored
        .iter()
        .enumerate()
        .min_by(|a, b| estimate(&a.1 .1).abs().total_cmp(&estimate(&b.1 .1).abs()))
        .map(|(i, _)| i)
        .expect("candidates");
    // An exact tie between neighbours resolves to the even mantissa.
    for nb in [best.wrapping_sub(1), best + 1] {
        if let Some((c, r)) = scored.get(nb) {
            let mut sum = scored[best].1.clone();
            for &x in r {
                grow(&mut sum, x);
            }
            if estimate(&sum) == 0.0 && c.to_bits() & 1 == 0 {
                return *c;
            }
        }
    }
    scored[best].0
}

/// Sample-weighted mean of client weights, `Σ (n_k / n) · w_k`, rounded once
/// per coordinate. Inputs are taken in the given order, which callers fix by
/// ascending client id.
pub fn aggregate(updates: &[(&ModelWeights, usize)]) -> Result<ModelWeights, FedError> {
    let (first, _) = updates.first().ok_or_else(|| protocol("no updates to aggregate"))?;
    for (w, n) in updates {
        if !w.same_shape(first) {
            return Err(protocol("weight shapes differ between clients"));
        }
        if *n == 0 {
            return Err(protocol("client reported zero training samples"));
        }
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    let flats: Vec<Vec<f64>> = updates.iter().map(|(w, _)| w.to_flat()).collect();
    if flats.iter().flatten().any(|v| !v.is_finite()) {
        return Err(protocol("non-finite weight"));
    }
    let out: Vec<f64> = (0..flats[0].len())
        .map(|i| {
            let mut e = vec![0.0];
            for (flat, (_, n)) in flats.iter().zip(updates) {
                let (hi, lo) = two_prod(flat[i], *n as f64);
                grow(&mut e, hi);
                grow(&mut e, lo);
            }
            divide_rounded(&e, total as f64)
        })
        .collect();
    Ok(ModelWeights::from_flat(&first.architecture(), &out)?)
}

/// `n_k / n` for each client.
pub fn mixing_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|n| *n as f64 / total as f64).collect()
}

// --- Messages -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub eta: f64,
    pub time: f64,
    pub event: bool,
}

/// A model's predictions on one client's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub c_statistic: Option<f64>,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalMetrics {
    /// The received global model on the test split; absent for the initial weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<EvalReport>,
    /// The locally trained model on the test split.
    pub local: EvalReport,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolMessage {
    Hello { client: ClientId },
    Join { spec: Option<ProjectionSpec>, rounds: u32 },
    Joined { client: ClientId, n_train: usize, layout_hash: String },
    BoundsRequest,
    BoundsReply { client: ClientId, stats: StationStats },
    Broadcast { round: u32, weights: ModelWeights },
    LocalUpdate { round: u32, client: ClientId, weights: ModelWeights, n_k: usize, metrics: LocalMetrics },
    LocalOnly { init_seed: u64 },
    Evaluation { round: u32, client: ClientId, report: EvalReport },
    Abort { round: u32, sender: String, reason: String },
    Finish,
}

/// Wire form: `{type, round, sender, payload}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(rename = "type")]
    pub kind: String,
    pub round: u32,
    pub sender: String,
    pub payload: serde_json::Value,
}

pub fn client_name(id: ClientId) -> String {
    format!("client-{id}")
}

pub const SERVER: &str = "server";

fn parse_client(sender: &str) -> Result<ClientId, FedError> {
    sender
        .strip_prefix("client-")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| protocol(format!("bad sender {sender:?}")))
}

impl ProtocolMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolMessage::Hello { .. } => "hello",
            ProtocolMessage::Join { .. } => "join",
            ProtocolMessage::Joined { .. } => "joined",
            ProtocolMessage::BoundsRequest => "bounds_request",
            ProtocolMessage::BoundsReply { .. } => "bounds_reply",
            ProtocolMessage::Broadcast { .. } => "broadcast",
            ProtocolMessage::LocalUpdate { .. } => "local_update",
            ProtocolMessage::LocalOnly { .. } => "local_only",
            ProtocolMessage::Evaluation { .. } => "evaluation",
            ProtocolMessage::Abort { .. } => "abort",
            ProtocolMessage::Finish => "finish",
        }
    }

    pub fn round(&self) -> u32 {
        match self {
            ProtocolMessage::Broadcast { round, .. }
            | ProtocolMessage::LocalUpdate { round, .. }
            | ProtocolMessage::Evaluation { round, .. }
            | ProtocolMessage::Abort { round, .. } => *round,
            _ => 0,
        }
    }

    pub fn carries_weights(&self) -> bool {
        matches!(self, ProtocolMessage::Broadcast { .. } | ProtocolMessage::LocalUpdate { .. })
    }

    pub fn to_envelope(&self, sender: &str) -> Result<Envelope, FedError> {
        use serde_json::json;
        let payload = match self {
            ProtocolMessage::Hello { .. } | ProtocolMessage::BoundsRequest | ProtocolMessage::Finish => json!({}),
            ProtocolMessage::Join { spec, rounds } => json!({"spec": spec, "rounds": rounds}),
            ProtocolMessage::Joined { n_train, layout_hash, .. } => json!({"n_train": n_train, "layout_hash": layout_hash}),
            ProtocolMessage::BoundsReply { stats, .. } => json!({"stats": stats}),
            ProtocolMessage::Broadcast { weights, .. } => json!({"weights": weights}),
            ProtocolMessage::LocalUpdate { weights, n_k, metrics, .. } => {
                json!({"weights": weights, "n_k": n_k, "metrics": metrics})
            }
            ProtocolMessage::LocalOnly { init_seed } => json!({"init_seed": init_seed}),
            ProtocolMessage::Evaluation { report, .. } => json!({"report": report}),
            ProtocolMessage::Abort { reason, .. } => json!({"reason": reason}),
        };
        Ok(Envelope {
            kind: self.kind().to_string(),
            round: self.round(),
            sender: sender.to_string(),
            payload,
        })
    }

    pub fn from_envelope(env: &Envelope) -> Result<ProtocolMessage, FedError> {
        fn field<T: serde::de::DeserializeOwned>(env: &Envelope, name: &str) -> Result<T, FedError> {
            let v = env
                .payload
                .get(name)
                .ok_or_else(|| protocol(format!("{} message lacks {name}", env.kind)))?;
            Ok(serde_json::from_value(v.clone())?)
        }
        let round = env.round;
        Ok(match env.kind.as_str() {
            "hello" => ProtocolMessage::Hello {
                client: parse_client(&env.sender)?,
            },
            "join" => ProtocolMessage::Join {
                spec: field(env, "spec")?,
                rounds: field(env, "rounds")?,
            },
            "joined" => ProtocolMessage::Joined {
                client: parse_client(&env.sender)?,
                n_train: field(env, "n_train")?,
                layout_hash: field(env, "layout_hash")?,
            },
            "bounds_request" => ProtocolMessage::BoundsRequest,
            "bounds_reply" => {
                let stats: StationStats = field(env, "stats")?;
                stats.check()?;
                ProtocolMessage::BoundsReply {
                    client: parse_client(&env.sender)?,
                    stats,
                }
            }
            "broadcast" => ProtocolMessage::Broadcast {
                round,
                weights: field(env, "weights")?,
            },
            "local_update" => ProtocolMessage::LocalUpdate {
                round,
                client: parse_client(&env.sender)?,
                weights: field(env, "weights")?,
                n_k: field(env, "n_k")?,
                metrics: field(env, "metrics")?,
            },
            "local_only" => ProtocolMessage::LocalOnly {
                init_seed: field(env, "init_seed")?,
            },
            "evaluation" => ProtocolMessage::Evaluation {
                round,
                client: parse_client(&env.sender)?,
                report: field(env, "report")?,
            },
            "abort" => ProtocolMessage::Abort {
                round,
                sender: env.sender.clone(),
                reason: field(env, "reason")?,
            },
            "finish" => ProtocolMessage::Finish,
            other => return Err(protocol(format!("unknown message type {other:?}"))),
        })
    }
}

// --- Access policy ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyViolation {
    pub column: String,
    pub expression: String,
}

/// Every expression the spec evaluates, labelled with the column it feeds.
pub fn spec_expressions(spec: &ProjectionSpec) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for c in &spec.columns {
        out.push((c.name.clone(), c.expression.clone()));
        if let Encoding::YearsBefore { reference } = &c.encoding {
            out.push((c.name.clone(), reference.clone()));
        }
    }
    out.push(("event_time".into(), spec.outcome.baseline.clone()));
    out.push(("event_time".into(), spec.outcome.last_contact.clone()));
    for e in &spec.outcome.events {
        out.push(("event".into(), e.clone()));
    }
    out
}

/// Checks that the spec only reads expressions on the station's allow-list.
/// Both sides are compared in canonical form.
pub fn policy_check(spec: &ProjectionSpec, allow: &[String]) -> Result<(), Vec<PolicyViolation>> {
    let allowed: Vec<String> = allow.iter().filter_map(|a| normalize(a)).collect();
    let violations: Vec<PolicyViolation> = spec_expressions(spec)
        .into_iter()
        .filter(|(_, e)| normalize(e).is_none_or(|n| !allowed.contains(&n)))
        .map(|(column, expression)| PolicyViolation { column, expression })
        .collect();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

// --- Client -------------------------------------------------------------------

/// Column summaries a station shares for model export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationStats {
    /// Raw-scale feature ranges.
    pub bounds: NormalizationBounds,
    /// Per column: median, or mode for categorical columns.
    pub fill: Vec<f64>,
    pub categorical: Vec<bool>,
    pub rows: usize,
}

impl StationStats {
    pub fn check(&self) -> Result<(), SurvivalError> {
        self.bounds.check()?;
        if self.fill.len() != self.bounds.len() || self.categorical.len() != self.bounds.len() {
            return Err(SurvivalError::Shape("station statistics of different lengths".into()));
        }
        Ok(())
    }
}

/// Pooled export statistics: merged ranges, row-weighted mean of medians,
/// row-weighted vote among modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub bounds: NormalizationBounds,
    pub fill: Vec<f64>,
}

pub fn combine_stats(stats: &[StationStats]) -> Result<GlobalStats, FedError> {
    let first = stats.first().ok_or_else(|| protocol("no station statistics"))?;
    let mut bounds = first.bounds.clone();
    for s in &stats[1..] {
        if s.categorical != first.categorical {
            return Err(protocol("stations disagree on categorical columns"));
        }
        bounds = bounds.merge(&s.bounds)?;
    }
    let total: usize = stats.iter().map(|s| s.rows).sum();
    if total == 0 {
        return Err(protocol("stations hold no rows"));
    }
    let fill = (0..first.fill.len())
        .map(|j| {
            if first.categorical[j] {
                let mut votes: Vec<(f64, usize)> = Vec::new();
                for s in stats {
                    match votes.iter_mut().find(|(v, _)| *v == s.fill[j]) {
                        Some(e) => e.1 += s.rows,
                        None => votes.push((s.fill[j], s.rows)),
                    }
                }
                votes.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.total_cmp(&b.0)));
                votes[0].0
            } else {
                stats.iter().map(|s| s.fill[j] * s.rows as f64).sum::<f64>() / total as f64
            }
        })
        .collect();
    Ok(GlobalStats { bounds, fill })
}

/// One station's preprocessed splits.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: SurvivalBatch,
    pub valid: SurvivalBatch,
    pub test: SurvivalBatch,
    pub stats: StationStats,
}

/// What a harmonized station agrees to expose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationPolicy {
    pub allow: Vec<String>,
    pub layout_hash: String,
}

impl StationPolicy {
    /// Allows exactly the expressions of `spec`.
    pub fn for_spec(spec: &ProjectionSpec) -> Self {
        Self {
            allow: spec_expressions(spec).into_iter().map(|(_, e)| e).collect(),
            layout_hash: spec.layout_hash(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: ClientId,
    data: ClientData,
    policy: Option<StationPolicy>,
    training: TrainingConfig,
    weights: Option<ModelWeights>,
    rounds: Option<u32>,
    next_round: u32,
}

/// Per-round training seed derived from the station's base seed.
pub fn round_seed(base: u64, round: u32) -> u64 {
    let mut z = base ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ClientState {
    /// Without a policy the station serves a plain table and accepts any
    /// session.
    pub fn new(id: ClientId, data: ClientData, policy: Option<StationPolicy>, training: TrainingConfig) -> Self {
        Self {
            id,
            data,
            policy,
            training,
            weights: None,
            rounds: None,
            next_round: 0,
        }
    }

    pub fn n_k(&self) -> usize {
        self.data.train.len()
    }

    pub fn weights(&self) -> Option<&ModelWeights> {
        self.weights.as_ref()
    }

    fn abort(&self, round: u32, reason: impl Into<String>) -> ProtocolMessage {
        ProtocolMessage::Abort {
            round,
            sender: client_name(self.id),
            reason: reason.into(),
        }
    }

    fn evaluate(&self, w: &ModelWeights) -> Result<EvalReport, SurvivalError> {
        let test = &self.data.test;
        let eta = predict(w, test.x())?;
        let c = c_statistic(&eta, test.time(), test.event()).ok();
        Ok(EvalReport {
            c_statistic: c,
            predictions: eta
                .iter()
                .zip(test.time().iter().zip(test.event()))
                .map(|(&eta, (&time, &event))| Prediction { eta, time, event })
                .collect(),
        })
    }

    fn train_round(&self, w: &ModelWeights, round: u32) -> Result<crate::survival::TrainOutcome, SurvivalError> {
        let cfg = TrainingConfig {
            seed: round_seed(self.training.seed, round),
            ..self.training.clone()
        };
        train_local(w, &self.data.train, &self.data.valid, &cfg)
    }

    /// The station's reaction to one server message.
    pub fn handle(&mut self, msg: ProtocolMessage) -> ProtocolMessage {
        match self.try_handle(msg) {
            Ok(reply) => reply,
            Err((round, reason)) => self.abort(round, reason),
        }
    }

    fn try_handle(&mut self, msg: ProtocolMessage) -> Result<ProtocolMessage, (u32, String)> {
        let fail = |round: u32| move |e: SurvivalError| (round, e.to_string());
        match msg {
            ProtocolMessage::Join { spec, rounds } => {
                let hash = spec.as_ref().map(ProjectionSpec::layout_hash).unwrap_or_default();
                if let Some(policy) = &self.policy {
                    let spec = spec.ok_or((0, "station requires a projection spec".to_string()))?;
                    if let Err(v) = policy_check(&spec, &policy.allow) {
                        let cols: Vec<String> = v.iter().map(|v| format!("{} ({})", v.column, v.expression)).collect();
                        return Err((0, format!("policy violation: {}", cols.join(", "))));
                    }
                    if hash != policy.layout_hash {
                        return Err((0, "projection layout differs from the station's table".into()));
                    }
                }
                if rounds == 0 {
                    return Err((0, "session needs at least one round".into()));
                }
                self.rounds = Some(rounds);
                self.next_round = 0;
                Ok(ProtocolMessage::Joined {
                    client: self.id,
                    n_train: self.n_k(),
                    layout_hash: hash,
                })
            }
            ProtocolMessage::BoundsRequest => Ok(ProtocolMessage::BoundsReply {
                client: self.id,
                stats: self.data.stats.clone(),
            }),
            ProtocolMessage::Broadcast { round, weights } => {
                let rounds = self.rounds.ok_or((round, "broadcast before join".to_string()))?;
                if round != self.next_round {
                    return Err((round, format!("round mismatch: expected {}, got {round}", self.next_round)));
                }
                if weights.input_dim() != self.data.train.x().ncols() || weights.check().is_err() {
                    return Err((round, "weight shape mismatch".into()));
                }
                let global = if round == 0 {
                    None
                } else {
                    Some(self.evaluate(&weights).map_err(fail(round))?)
                };
                if round == rounds {
                    self.weights = Some(weights);
                    self.next_round = round + 1;
                    return Ok(ProtocolMessage::Evaluation {
                        round,
                        client: self.id,
                        report: global.expect("final round is not round 0"),
                    });
                }
                let out = self.train_round(&weights, round).map_err(fail(round))?;
                let local = self.evaluate(&out.weights).map_err(fail(round))?;
                self.weights = Some(out.weights.clone());
                self.next_round = round + 1;
                Ok(ProtocolMessage::LocalUpdate {
                    round: round + 1,
                    client: self.id,
                    weights: out.weights,
                    n_k: self.n_k(),
                    metrics: LocalMetrics {
                        global,
                        local,
                        epochs_run: out.history.len(),
                        best_epoch: out.best_epoch,
                    },
                })
            }
            ProtocolMessage::LocalOnly { init_seed } => {
                if self.rounds.is_none() {
                    return Err((0, "local training before join".into()));
                }
                let w0 = ModelWeights::init(self.data.train.x().ncols(), init_seed).map_err(fail(0))?;
                let out = self.train_round(&w0, 0).map_err(fail(0))?;
                let report = self.evaluate(&out.weights).map_err(fail(1))?;
                self.weights = Some(out.weights);
                Ok(ProtocolMessage::Evaluation {
                    round: 1,
                    client: self.id,
                    report,
                })
            }
            other => Err((other.round(), format!("unexpected {} message", other.kind()))),
        }
    }
}

// --- Transports ---------------------------------------------------------------

pub trait Transport {
    fn client_ids(&self) -> Vec<ClientId>;

    /// Delivers each message to its client and waits for every reply. Replies
    /// come back in ascending client order.
    fn round_trip(&mut self, outgoing: Vec<(ClientId, ProtocolMessage)>) -> Result<Vec<(ClientId, ProtocolMessage)>, FedError>;

    /// One-way delivery, no reply expected.
    fn notify(&mut self, outgoing: Vec<(ClientId, ProtocolMessage)>) -> Result<(), FedError>;
}

/// Runs station state machines in this process. Stations handle a round's
/// messages in parallel.
pub struct InProcessTransport {
    clients: BTreeMap<ClientId, ClientState>,
}

impl InProcessTransport {
    pub fn new(clients: Vec<ClientState>) -> Self {
        Self {
            clients: clients.into_iter().map(|c| (c.id, c)).collect(),
        }
    }

    pub fn client(&self, id: ClientId) -> Option<&ClientState> {
        self.clients.get(&id)
    }
}

impl Transport for InProcessTransport {
    fn client_ids(&self) -> Vec<ClientId> {
        self.clients.keys().copied().collect()
    }

    fn round_trip(&mut self, outgoing: Vec<(ClientId, ProtocolMessage)>) -> Result<Vec<(ClientId, ProtocolMessage)>, FedError> {
        let mut inbox: BTreeMap<ClientId, ProtocolMessage> = BTreeMap::new();
        for (id, msg) in outgoing {
            if !self.clients.contains_key(&id) {
                return Err(protocol(format!("unknown client {id}")));
            }
            if inbox.insert(id, msg).is_some() {
                return Err(protocol(format!("two messages for client {id} in one exchange")));
            }
        }
        let mut work: Vec<(&mut ClientState, ProtocolMessage)> = self
            .clients
            .iter_mut()
            .filter_map(|(id, c)| inbox.remove(id).map(|m| (c, m)))
            .collect();
        Ok(work.par_iter_mut().map(|(c, m)| (c.id, c.handle(m.clone()))).collect())
    }

    fn notify(&mut self, _outgoing: Vec<(ClientId, ProtocolMessage)>) -> Result<(), FedError> {
        Ok(())
    }
}

/// Records every message in wire form while delegating to another transport.
pub struct Tap<T> {
    inner: T,
    pub transcript: Vec<Envelope>,
}

impl<T: Transport> Tap<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            transcript: Vec::new(),
        }
    }

    pub fn into_inner(self) -> T {
        self.inner
    }

    pub fn count(&self, kind: &str) -> usize {
        self.transcript.iter().filter(|e| e.kind == kind).count()
    }
}

impl<T: Transport> Transport for Tap<T> {
    fn client_ids(&self) -> Vec<ClientId> {
        self.inner.client_ids()
    }

    fn round_trip(&mut self, outgoing: Vec<(ClientId, ProtocolMessage)>) -> Result<Vec<(ClientId, ProtocolMessage)>, FedError> {
        for (_, m) in &outgoing {
            self.transcript.push(m.to_envelope(SERVER)?);
        }
        let replies = self.inner.round_trip(outgoing)?;
        for (id, m) in &replies {
            self.transcript.push(m.to_envelope(&client_name(*id))?);
        }
        Ok(replies)
    }

    fn notify(&mut self, outgoing: Vec<(ClientId, ProtocolMessage)>) -> Result<(), FedError> {
        for (_, m) in &outgoing {
            self.transcript.push(m.to_envelope(SERVER)?);
        }
        self.inner.notify(outgoing)
    }
}

pub fn write_frame<W: Write>(w: &mut W, env: &Envelope) -> Result<(), FedError> {
    let body = serde_json::to_vec(env)?;
    if body.len() > MAX_FRAME {
        return Err(protocol("frame too large"));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Envelope, FedError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(protocol("frame too large"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(serde_json::from_slice(&body)?)
}

fn is_timeout(e: &FedError) -> bool {
    matches!(e, FedError::Io(io) if matches!(io.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut))
}

/// Server side of the socket transport: one connection per station.
pub struct TcpServerTransport {
    peers: BTreeMap<ClientId, TcpStream>,
}

impl TcpServerTransport {
    /// Accepts `k` stations; each must introduce itself with a hello message.
    /// Connections closed before sending anything (port probes) are skipped.
    pub fn accept(listener: &TcpListener, k: usize, timeout: Duration) -> Result<Self, FedError> {
        let mut peers = BTreeMap::new();
        while peers.len() < k {
            let (mut stream, _) = listener.accept()?;
            stream.set_read_timeout(Some(timeout))?;
            stream.set_write_timeout(Some(timeout))?;
            stream.set_nodelay(true)?;
            let env = match read_frame(&mut stream) {
                Err(FedError::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => continue,
                other => other?,
            };
            match ProtocolMessage::from_envelope(&env)? {
                ProtocolMessage::Hello { client } => {
                    if peers.insert(client, stream).is_some() {
                        return Err(protocol(format!("client {client} connected twice")));
                    }
                }
                other => return Err(protocol(format!("expected hello, got {}", other.kind()))),
            }
        }
        Ok(Self { peers })
    }

    fn send(&mut self, outgoing: &[(ClientId, ProtocolMessage)]) -> Result<(), FedError> {
        for (id, m) in outgoing {
            let peer = self.peers.get_mut(id).ok_or_else(|| protocol(format!("unknown client {id}")))?;
            write_frame(peer, &m.to_envelope(SERVER)?)?;
        }
        Ok(())
    }
}

impl Transport for TcpServerTransport {
    fn client_ids(&self) -> Vec<ClientId> {
        self.peers.keys().copied().collect()
    }

    fn round_trip(&mut self, mut outgoing: Vec<(ClientId, ProtocolMessage)>) -> Result<Vec<(ClientId, ProtocolMessage)>, FedError> {
        outgoing.sort_by_key(|(id, _)| *id);
        self.send(&outgoing)?;
        let mut replies = Vec::with_capacity(outgoing.len());
        for (id, m) in &outgoing {
            let peer = self.peers.get_mut(id).expect("sent above");
            let env = read_frame(peer).map_err(|e| {
                if is_timeout(&e) {
                    FedError::Timeout { round: m.round(), client: *id }
                } else {
                    e
                }
            })?;
            if env.sender != client_name(*id) {
                return Err(protocol(format!("reply from {} on client {id}'s connection", env.sender)));
            }
            replies.push((*id, ProtocolMessage::from_envelope(&env)?));
        }
        Ok(replies)
    }

    fn notify(&mut self, outgoing: Vec<(ClientId, ProtocolMessage)>) -> Result<(), FedError> {
        self.send(&outgoing)
    }
}

/// Station side of the socket transport: connect, introduce, then answer
/// messages until the server finishes the session.
pub fn run_station<A: ToSocketAddrs>(addr: A, mut state: ClientState, timeout: Duration) -> Result<ClientState, FedError> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    let me = client_name(state.id);
    write_frame(&mut stream, &ProtocolMessage::Hello { client: state.id }.to_envelope(&me)?)?;
    loop {
        let msg = ProtocolMessage::from_envelope(&read_frame(&mut stream)?)?;
        if msg == ProtocolMessage::Finish {
            return Ok(state);
        }
        let reply = state.handle(msg);
        write_frame(&mut stream, &reply.to_envelope(&me)?)?;
        if let ProtocolMessage::Abort { reason, round, .. } = reply {
            return Err(FedError::Abort { round, client: me, reason });
        }
    }
}

// --- Server -------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    /// I: global update rounds.
    pub rounds: u32,
    /// Seed of the initial global weights.
    pub seed: u64,
    /// Keep w̄ after every round in the result.
    pub keep_trajectory: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: DEFAULT_ROUNDS,
            seed: 0,
            keep_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    /// Per client, in ascending id order.
    pub local: Vec<(ClientId, Option<f64>)>,
    /// Pooled over every client's test predictions.
    pub global: Option<f64>,
}

fn pooled(round: u32, reports: &[(ClientId, EvalReport)]) -> RoundMetrics {
    let all: Vec<&Prediction> = reports.iter().flat_map(|(_, r)| &r.predictions).collect();
    let eta: Vec<f64> = all.iter().map(|p| p.eta).collect();
    let time: Vec<f64> = all.iter().map(|p| p.time).collect();
    let event: Vec<bool> = all.iter().map(|p| p.event).collect();
    RoundMetrics {
        round,
        local: reports.iter().map(|(id, r)| (*id, r.c_statistic)).collect(),
        global: c_statistic(&eta, &time, &event).ok(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub weights: ModelWeights,
    /// Metrics of w̄ after each round, rounds 1..=I.
    pub rounds: Vec<RoundMetrics>,
    /// Metrics of each client's locally trained model, per round.
    pub local_models: Vec<RoundMetrics>,
    /// w̄ after each round when requested.
    pub trajectory: Vec<ModelWeights>,
    pub n_train: Vec<(ClientId, usize)>,
    /// Test predictions of the final w̄, per client.
    pub final_reports: Vec<(ClientId, EvalReport)>,
}

fn check_reply(round: u32, id: ClientId, msg: &ProtocolMessage) -> Result<(), FedError> {
    if let ProtocolMessage::Abort { round, sender, reason } = msg {
        return Err(FedError::Abort {
            round: *round,
            client: sender.clone(),
            reason: reason.clone(),
        });
    }
    if msg.round() != round {
        return Err(protocol(format!("client {id} answered round {} in round {round}", msg.round())));
    }
    Ok(())
}

fn all(ids: &[ClientId], msg: &ProtocolMessage) -> Vec<(ClientId, ProtocolMessage)> {
    ids.iter().map(|id| (*id, msg.clone())).collect()
}

/// Join every station, checking that all agree on the table layout.
pub fn join<T: Transport>(transport: &mut T, spec: Option<&ProjectionSpec>, rounds: u32) -> Result<Vec<(ClientId, usize)>, FedError> {
    let ids = transport.client_ids();
    if ids.is_empty() {
        return Err(protocol("no clients"));
    }
    let hash = spec.map(ProjectionSpec::layout_hash).unwrap_or_default();
    let replies = transport.round_trip(all(
        &ids,
        &ProtocolMessage::Join {
            spec: spec.cloned(),
            rounds,
        },
    ))?;
    let mut counts = Vec::new();
    for (id, msg) in replies {
        check_reply(0, id, &msg)?;
        match msg {
            ProtocolMessage::Joined { n_train, layout_hash, .. } if layout_hash == hash => counts.push((id, n_train)),
            ProtocolMessage::Joined { .. } => return Err(protocol(format!("client {id} reports a different layout"))),
            other => return Err(protocol(format!("client {id} answered join with {}", other.kind()))),
        }
    }
    Ok(counts)
}

/// Collects every station's export statistics.
pub fn federated_stats<T: Transport>(transport: &mut T) -> Result<GlobalStats, FedError> {
    let ids = transport.client_ids();
    let mut stats = Vec::with_capacity(ids.len());
    for (id, msg) in transport.round_trip(all(&ids, &ProtocolMessage::BoundsRequest))? {
        check_reply(0, id, &msg)?;
        let ProtocolMessage::BoundsReply { stats: s, .. } = msg else {
            return Err(protocol(format!("client {id} answered bounds request with {}", msg.kind())));
        };
        stats.push(s);
    }
    combine_stats(&stats)
}

/// Global raw-scale feature ranges: the union of every station's ranges.
pub fn federated_minmax<T: Transport>(transport: &mut T) -> Result<NormalizationBounds, FedError> {
    Ok(federated_stats(transport)?.bounds)
}

/// FedAvg. Stations must have joined. Every round waits for all K updates.
pub fn server_run<T: Transport>(cfg: &FedConfig, input_dim: usize, transport: &mut T) -> Result<SessionResult, FedError> {
    if cfg.rounds == 0 {
        return Err(protocol("at least one round is required"));
    }
    let ids = transport.client_ids();
    let mut global = ModelWeights::init(input_dim, cfg.seed)?;
    let mut rounds = Vec::with_capacity(cfg.rounds as usize);
    let mut local_models = Vec::with_capacity(cfg.rounds as usize);
    let mut trajectory = Vec::new();
    let mut n_train = Vec::new();
    for r in 0..cfg.rounds {
        let replies = transport.round_trip(all(
            &ids,
            &ProtocolMessage::Broadcast {
                round: r,
                weights: global.clone(),
            },
        ))?;
        let mut updates = Vec::with_capacity(ids.len());
        let mut local = Vec::with_capacity(ids.len());
        let mut received_global = Vec::with_capacity(ids.len());
        for (id, msg) in replies {
            check_reply(r + 1, id, &msg)?;
            let ProtocolMessage::LocalUpdate { weights, n_k, metrics, client, .. } = msg else {
                return Err(protocol(format!("client {id} answered broadcast with {}", msg.kind())));
            };
            if client != id {
                return Err(protocol(format!("client {id} signed an update as {client}")));
            }
            if !weights.same_shape(&global) {
                return Err(protocol(format!("client {id} sent weights of the wrong shape")));
            }
            local.push((id, metrics.local));
            if let Some(g) = metrics.global {
                received_global.push((id, g));
            }
            updates.push((id, weights, n_k));
        }
        if r > 0 {
            if received_global.len() != ids.len() {
                return Err(protocol(format!("round {r}: missing global evaluations")));
            }
            rounds.push(pooled(r, &received_global));
        }
        local_models.push(pooled(r + 1, &local));
        updates.sort_by_key(|(id, _, _)| *id);
        if r == 0 {
            n_train = updates.iter().map(|(id, _, n)| (*id, *n)).collect();
        }
        let refs: Vec<(&ModelWeights, usize)> = updates.iter().map(|(_, w, n)| (w, *n)).collect();
        global = aggregate(&refs)?;
        if cfg.keep_trajectory {
            trajectory.push(global.clone());
        }
    }
    let last = cfg.rounds;
    let replies = transport.round_trip(all(
        &ids,
        &ProtocolMessage::Broadcast {
            round: last,
            weights: global.clone(),
        },
    ))?;
    let mut final_reports = Vec::new();
    for (id, msg) in replies {
        check_reply(last, id, &msg)?;
        let ProtocolMessage::Evaluation { report, .. } = msg else {
            return Err(protocol(format!("client {id} answered the final broadcast with {}", msg.kind())));
        };
        final_reports.push((id, report));
    }
    rounds.push(pooled(last, &final_reports));
    transport.notify(all(&ids, &ProtocolMessage::Finish))?;
    Ok(SessionResult {
        weights: global,
        rounds,
        local_models,
        trajectory,
        n_train,
        final_reports,
    })
}

/// The no-aggregation arm: each station trains once from the shared initial
/// weights and reports test predictions. No weights are exchanged.
pub fn local_only_run<T: Transport>(init_seed: u64, transport: &mut T) -> Result<RoundMetrics, FedError> {
    let ids = transport.client_ids();
    let mut reports = Vec::new();
    for (id, msg) in transport.round_trip(all(&ids, &ProtocolMessage::LocalOnly { init_seed }))? {
        check_reply(1, id, &msg)?;
        let ProtocolMessage::Evaluation { report, .. } = msg else {
            return Err(protocol(format!("client {id} answered local training with {}", msg.kind())));
        };
        reports.push((id, report));
    }
    transport.notify(all(&ids, &ProtocolMessage::Finish))?;
    Ok(pooled(1, &reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use proptest::prelude::*;

    fn rat(x: f64) -> BigRational {
        BigRational::from_float(x).expect("finite")
    }

    fn exact_mean(values: &[f64], counts: &[usize]) -> BigRational {
        let total: usize = counts.iter().sum();
        let sum = values
            .iter()
            .zip(counts)
            .fold(BigRational::from_integer(BigInt::from(0)), |acc, (v, n)| acc + rat(*v) * BigRational::from_integer(BigInt::from(*n)));
        sum / BigRational::from_integer(BigInt::from(total))
    }

    fn mean_of(values: &[f64], counts: &[usize]) -> f64 {
        let ws: Vec<ModelWeights> = values
            .iter()
            .map(|v| ModelWeights::from_flat(&[1, 1], &[*v, 0.0]).unwrap())
            .collect();
        let refs: Vec<(&ModelWeights, usize)> = ws.iter().zip(counts).map(|(w, n)| (w, *n)).collect();
        aggregate(&refs).unwrap().to_flat()[0]
    }

    fn assert_nearest(values: &[f64], counts: &[usize]) {
        let got = mean_of(values, counts);
        let exact = exact_mean(values, counts);
        let err = |c: f64| {
            let d = rat(c) - &exact;
            if d < BigRational::from_integer(BigInt::from(0)) {
                -d
            } else {
                d
            }
        };
        let e = err(got);
        assert!(e <= err(next_up(got)), "{values:?} {counts:?}: {got} is not nearest");
        assert!(e <= err(next_down(got)), "{values:?} {counts:?}: {got} is not nearest");
    }

    #[test]
    fn single_client_is_identity() {
        let w = ModelWeights::init(5, 3).unwrap();
        assert_eq!(aggregate(&[(&w, 17)]).unwrap(), w);
    }

    #[test]
    fn identical_clients_reproduce_the_weights() {
        let w = ModelWeights::init(4, 9).unwrap();
        assert_eq!(aggregate(&[(&w, 3), (&w, 1000), (&w, 7)]).unwrap(), w);
    }

    #[test]
    fn weighted_mean_example() {
        assert_eq!(mean_of(&[1.0, 4.0], &[2, 1]), 2.0);
        assert_eq!(mean_of(&[0.1, 0.2, 0.3], &[1, 1, 1]), 0.2);
    }

    #[test]
    fn cancellation_is_exact() {
        // Naive summation loses the small term entirely.
        assert_nearest(&[1e16, 1.0, -1e16], &[1, 1, 1]);
        assert_eq!(mean_of(&[1e16, 1.0, -1e16], &[1, 1, 1]), 1.0 / 3.0);
    }

    #[test]
    fn halfway_rounds_to_even() {
        let a = 1.0;
        let b = next_up(1.0);
        // (a + b) / 2 is exactly halfway; the even neighbour is 1.0.
        assert_eq!(mean_of(&[a, b], &[1, 1]), 1.0);
        let c = next_up(b);
        assert_eq!(mean_of(&[b, c], &[1, 1]), c);
    }

    #[test]
    fn mixing_weights_sum_to_one() {
        let w = mixing_weights(&[491, 295, 197]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = ModelWeights::init(3, 0).unwrap();
        let b = ModelWeights::init(4, 0).unwrap();
        assert!(aggregate(&[(&a, 1), (&b, 1)]).is_err());
        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[(&a, 0)]).is_err());
    }

    #[test]
    fn envelope_round_trip() {
        let w = ModelWeights::init(3, 1).unwrap();
        let msgs = vec![
            ProtocolMessage::Broadcast { round: 2, weights: w.clone() },
            ProtocolMessage::LocalUpdate {
                round: 3,
                client: 4,
                weights: w,
                n_k: 10,
                metrics: LocalMetrics {
                    global: None,
                    local: EvalReport {
                        c_statistic: Some(0.7),
                        predictions: vec![Prediction { eta: 0.1, time: 2.5, event: true }],
                    },
                    epochs_run: 3,
                    best_epoch: 2,
                },
            },
            ProtocolMessage::Evaluation {
                round: 5,
                client: 4,
                report: EvalReport { c_statistic: None, predictions: vec![] },
            },
            ProtocolMessage::Abort { round: 1, sender: client_name(4), reason: "no".into() },
            ProtocolMessage::BoundsRequest,
            ProtocolMessage::LocalOnly { init_seed: 8 },
            ProtocolMessage::Finish,
        ];
        for m in msgs {
            let sender = match &m {
                ProtocolMessage::LocalUpdate { .. } | ProtocolMessage::Evaluation { .. } => client_name(4),
                ProtocolMessage::Abort { sender, .. } => sender.clone(),
                _ => SERVER.to_string(),
            };
            let env = m.to_envelope(&sender).unwrap();
            let mut buf = Vec::new();
            write_frame(&mut buf, &env).unwrap();
            assert_eq!(u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize, buf.len() - 4);
            let back = read_frame(&mut buf.as_slice()).unwrap();
            assert_eq!(ProtocolMessage::from_envelope(&back).unwrap(), m);
        }
    }

    #[test]
    fn policy_names_offending_columns() {
        let spec = ProjectionSpec::default_spec();
        let allow: Vec<String> = spec_expressions(&spec).into_iter().map(|(_, e)| e).collect();
        assert!(policy_check(&spec, &allow).is_ok());
        // Whitespace differences do not matter.
        let spaced: Vec<String> = allow.iter().map(|e| e.replace('.', " . ")).collect();
        assert!(policy_check(&spec, &spaced).is_ok());
        let narrowed: Vec<String> = allow.iter().filter(|e| !e.contains("creatinine")).cloned().collect();
        let v = policy_check(&spec, &narrowed).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].column, "creatinine");
    }

    #[test]
    fn round_seeds_differ() {
        assert_ne!(round_seed(1, 0), round_seed(1, 1));
        assert_ne!(round_seed(1, 0), round_seed(2, 0));
        assert_eq!(round_seed(5, 3), round_seed(5, 3));
    }

    fn value() -> impl Strategy<Value = f64> {
        prop_oneof![
            -1e3f64..1e3,
            (-1.0f64..1.0, -60i32..60).prop_map(|(m, e)| m * 2f64.powi(e)),
            Just(0.0),
            Just(1e300),
            Just(-1e300),
        ]
    }

    proptest! {
        #[test]
        fn aggregate_is_correctly_rounded(
            pairs in prop::collection::vec((value(), 1usize..5000), 1..8),
        ) {
            let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let counts: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            assert_nearest(&values, &counts);
        }

        #[test]
        fn aggregate_stays_in_hull(
            pairs in prop::collection::vec((-10.0f64..10.0, 1usize..100), 1..6),
        ) {
            let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let counts: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let m = mean_of(&values, &counts);
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= m && m <= hi);
        }
    }
}
