//! The node state machine.
//!
//! [`Node`] performs no I/O, reads no clock and never trains inline. Inputs
//! are server frames, peer frames, finished training jobs, peer failures and
//! ticks, each stamped with a millisecond time; outputs are [`Action`]s. The
//! tokio driver and the simulation harness run the same machine.
//!
//! Training is handed out as a [`TrainJob`] so the caller decides where it
//! runs. Only one job is outstanding at a time and the model is never
//! modified while an exchange is in flight.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use colearn_core::data::Dataset;
use colearn_core::model::{init_params, train_epochs_with, ModelError, TrainConfig, TrainOutcome};
use colearn_core::par::Exec;
use colearn_core::privacy::{privatize, FixedPointCodec, PrivacyConfig, DEFAULT_SCALE_BITS};
use colearn_core::rng::derive_key;
use colearn_core::task::{Scheme, TaskSpec};
use colearn_core::wire::{Message, PeerInfo};
use colearn_core::{ClientId, ParamVector};
use serde::{Deserialize, Serialize};

use crate::exchange::{dial_plan, Exchange, Progress};

const NOISE_STREAM: u64 = 0x006e_6f69_7365;
const SHARE_STREAM: u64 = 0x0073_6861_7265;

/// Error codes after which the node keeps going.
const BENIGN_ERRORS: &[&str] = &["late_update", "duplicate_update", "bad_metrics"];

/// Where the node's private randomness (noise, share masks) comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Randomness {
    /// Fresh operating-system randomness for every draw.
    Os,
    /// Streams derived from a seed, for reproducible simulations.
    Seeded(u64),
}

#[derive(Debug, Clone)]
pub struct NodeSetup {
    pub task_id: String,
    pub data: Arc<Dataset>,
    /// Address peers can dial, announced on join. Required by decentralized
    /// tasks.
    pub listen_address: Option<String>,
    pub randomness: Randomness,
    pub heartbeat_interval_ms: u64,
}

impl NodeSetup {
    pub fn new(task_id: impl Into<String>, data: Dataset) -> Self {
        Self {
            task_id: task_id.into(),
            data: Arc::new(data),
            listen_address: None,
            randomness: Randomness::Os,
            heartbeat_interval_ms: 10_000,
        }
    }
}

/// Local training for one round, to be run wherever the caller likes.
#[derive(Debug, Clone)]
pub struct TrainJob {
    pub round: u64,
    pub start: ParamVector,
    /// 0-based global index of the first epoch.
    pub first_epoch: u64,
    pub epochs: u64,
    pub config: TrainConfig,
    pub data: Arc<Dataset>,
}

impl TrainJob {
    pub fn run(&self) -> Result<TrainOutcome, ModelError> {
        self.run_with(Exec::default())
    }

    pub fn run_with(&self, exec: Exec) -> Result<TrainOutcome, ModelError> {
        train_epochs_with(exec, &self.start, &self.data, &self.config, self.first_epoch, self.epochs)
    }
}

/// One epoch of local training. `epoch` is 1-based and counts across rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricRecord {
    pub round: u64,
    pub epoch: u64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Finish {
    /// The session ran all its rounds.
    Completed { rounds: u64 },
    /// The node gave up; the string says why.
    Failed(String),
}

#[derive(Debug, Clone)]
pub enum Action {
    SendServer(Message),
    SendPeer {
        to: ClientId,
        message: Message,
    },
    /// Open connections for a peer round: dial `dial`, expect `accept` to dial in.
    ConnectPeers {
        round: u64,
        dial: Vec<PeerInfo>,
        accept: Vec<ClientId>,
    },
    /// The exchange is over; peer connections may be closed.
    ClosePeers { round: u64 },
    Train(TrainJob),
    Metrics(MetricRecord),
    Done(Finish),
}

#[derive(Debug, Clone)]
enum Stage {
    Joining,
    /// Joined, waiting for the coordinator to start a round.
    Idle,
    Training {
        round: u64,
        start: ParamVector,
    },
    /// Federated: update sent, waiting for the global model.
    Uploaded,
    /// Decentralized: ready signal sent, waiting for the peer list.
    Ready {
        round: u64,
        local: ParamVector,
        contribution: ParamVector,
    },
    Exchanging {
        exchange: Box<Exchange>,
        local: ParamVector,
    },
    /// All rounds done; waiting for the session to close.
    Finishing,
    Done,
}

/// Summary of a node's run.
#[derive(Debug, Clone, Default)]
pub struct NodeReport {
    pub client_id: Option<ClientId>,
    pub params: Option<ParamVector>,
    pub metrics: Vec<MetricRecord>,
    pub rounds_completed: u64,
    pub rounds_failed: u64,
    /// Decentralized rounds whose exchange failed, with the reason.
    pub exchange_failures: Vec<(u64, String)>,
    pub finish: Option<Finish>,
}

#[derive(Debug, Clone)]
pub struct Node {
    setup: NodeSetup,
    stage: Stage,
    client_id: Option<ClientId>,
    spec: Option<TaskSpec>,
    params: Option<ParamVector>,
    /// Next decentralized round to work on.
    round: u64,
    in_flight: Option<(u64, ParamVector)>,
    /// Last federated upload, resent if its round is restarted.
    last_upload: Option<(u64, ParamVector, Message)>,
    /// Peer messages that arrived before this node reached their round.
    early: BTreeMap<u64, Vec<(ClientId, Message)>>,
    last_sent: u64,
    last_aggregate: Option<ParamVector>,
    metrics: Vec<MetricRecord>,
    rounds_completed: u64,
    rounds_failed: u64,
    exchange_failures: Vec<(u64, String)>,
    finish: Option<Finish>,
}

impl Node {
    /// Creates a node and returns its join request.
    pub fn new(setup: NodeSetup, now: u64) -> (Node, Vec<Action>) {
        let mut node = Node {
            setup,
            stage: Stage::Joining,
            client_id: None,
            spec: None,
            params: None,
            round: 0,
            in_flight: None,
            last_upload: None,
            early: BTreeMap::new(),
            last_sent: now,
            last_aggregate: None,
            metrics: Vec::new(),
            rounds_completed: 0,
            rounds_failed: 0,
            exchange_failures: Vec::new(),
            finish: None,
        };
        let mut out = Vec::new();
        node.send_join(now, &mut out);
        (node, out)
    }

    pub fn task_id(&self) -> &str {
        &self.setup.task_id
    }

    pub fn client_id(&self) -> Option<ClientId> {
        self.client_id
    }

    pub fn spec(&self) -> Option<&TaskSpec> {
        self.spec.as_ref()
    }

    /// Current local model.
    pub fn params(&self) -> Option<&ParamVector> {
        self.params.as_ref()
    }

    /// Most recent aggregate: the global model (federated) or the peer
    /// average (decentralized).
    pub fn last_aggregate(&self) -> Option<&ParamVector> {
        self.last_aggregate.as_ref()
    }

    pub fn metrics(&self) -> &[MetricRecord] {
        &self.metrics
    }

    pub fn is_done(&self) -> bool {
        matches!(self.stage, Stage::Done)
    }

    pub fn report(&self) -> NodeReport {
        NodeReport {
            client_id: self.client_id,
            params: self.params.clone(),
            metrics: self.metrics.clone(),
            rounds_completed: self.rounds_completed,
            rounds_failed: self.rounds_failed,
            exchange_failures: self.exchange_failures.clone(),
            finish: self.finish.clone(),
        }
    }

    /// Short label of the current stage, for logs.
    pub fn stage_name(&self) -> &'static str {
        match self.stage {
            Stage::Joining => "joining",
            Stage::Idle => "idle",
            Stage::Training { .. } => "training",
            Stage::Uploaded => "uploaded",
            Stage::Ready { .. } => "ready",
            Stage::Exchanging { .. } => "exchanging",
            Stage::Finishing => "finishing",
            Stage::Done => "done",
        }
    }

    fn send(&mut self, msg: Message, now: u64, out: &mut Vec<Action>) {
        self.last_sent = now;
        out.push(Action::SendServer(msg));
    }

    fn send_join(&mut self, now: u64, out: &mut Vec<Action>) {
        let msg = Message::JoinTask {
            capabilities: vec!["train".into()],
            listen_address: self.setup.listen_address.clone(),
        };
        self.send(msg, now, out);
    }

    fn finish(&mut self, finish: Finish, out: &mut Vec<Action>) {
        if matches!(self.stage, Stage::Exchanging { .. }) {
            out.push(Action::ClosePeers { round: self.round });
        }
        self.stage = Stage::Done;
        self.finish = Some(finish.clone());
        out.push(Action::Done(finish));
    }

    fn fail(&mut self, reason: String, now: u64, out: &mut Vec<Action>) {
        if self.client_id.is_some() {
            self.send(Message::Leave {}, now, out);
        }
        self.finish(Finish::Failed(reason), out);
    }

    /// Starts over with a fresh join, e.g. after the server dropped this
    /// client or the connection was re-established. The local model is kept.
    pub fn rejoin(&mut self, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        if matches!(self.stage, Stage::Done) {
            return out;
        }
        if matches!(self.stage, Stage::Exchanging { .. }) {
            out.push(Action::ClosePeers { round: self.round });
        }
        self.client_id = None;
        self.stage = Stage::Joining;
        self.early.clear();
        self.last_upload = None;
        self.send_join(now, &mut out);
        out
    }

    fn seed(&self, stream: u64, round: u64) -> u64 {
        match self.setup.randomness {
            Randomness::Os => rand::random(),
            Randomness::Seeded(seed) => {
                let task = self.spec.as_ref().map_or(0, |s| s.privacy.noise_seed);
                let node = derive_key(derive_key(seed, stream), task);
                derive_key(derive_key(node, self.client_id.unwrap_or(0)), round)
            }
        }
    }

    /// Clip and noise `local - start` under the task's privacy settings.
    fn privatized_delta(&self, start: &ParamVector, local: &ParamVector, round: u64) -> Result<ParamVector, String> {
        let spec = self.spec.as_ref().expect("joined");
        let delta = local.sub(start).map_err(|e| e.to_string())?;
        let cfg = PrivacyConfig {
            noise_seed: self.seed(NOISE_STREAM, round),
            ..spec.privacy
        };
        privatize(&delta, &cfg).map_err(|e| e.to_string())
    }

    fn begin_training(&mut self, round: u64, start: ParamVector, out: &mut Vec<Action>) {
        self.stage = Stage::Training {
            round,
            start: start.clone(),
        };
        if self.in_flight.is_none() {
            self.launch(round, start, out);
        }
        // Otherwise the stale job's completion launches this one.
    }

    fn launch(&mut self, round: u64, start: ParamVector, out: &mut Vec<Action>) {
        let spec = self.spec.as_ref().expect("joined");
        let e = spec.train.epochs_per_round;
        self.in_flight = Some((round, start.clone()));
        out.push(Action::Train(TrainJob {
            round,
            start,
            first_epoch: round * e,
            epochs: e,
            config: spec.train,
            data: Arc::clone(&self.setup.data),
        }));
    }

    /// Processes one frame from the coordinator.
    pub fn on_server(&mut self, msg: Message, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        if matches!(self.stage, Stage::Done) {
            return out;
        }
        match msg {
            Message::Assigned { client_id, task } => self.on_assigned(client_id, task, now, &mut out),
            Message::RoundStart { round, global_params } => self.on_round_start(round, global_params, now, &mut out),
            Message::GlobalUpdate { round, params, .. } => self.on_global(round, params, &mut out),
            Message::PeerList { round, peers } => self.on_peer_list(round, peers, now, &mut out),
            Message::SessionPaused { .. } => {}
            Message::SessionFinished { rounds } => self.finish(Finish::Completed { rounds }, &mut out),
            Message::Error { code, detail } => {
                if code == "departed" {
                    out = self.rejoin(now);
                } else if !BENIGN_ERRORS.contains(&code.as_str()) {
                    self.fail(format!("server error {code}: {detail}"), now, &mut out);
                }
            }
            other => {
                let kind = other.kind();
                self.fail(format!("unexpected {kind} from server"), now, &mut out);
            }
        }
        out
    }

    fn on_assigned(&mut self, client_id: ClientId, task: TaskSpec, now: u64, out: &mut Vec<Action>) {
        if !matches!(self.stage, Stage::Joining) {
            return;
        }
        if task.task_id != self.setup.task_id {
            return self.fail(format!("assigned to task {} instead of {}", task.task_id, self.setup.task_id), now, out);
        }
        let data = &self.setup.data;
        if data.n_features() != task.model.input_dim {
            let msg = format!(
                "local data has {} features, task model expects {}",
                data.n_features(),
                task.model.input_dim
            );
            self.client_id = Some(client_id);
            return self.fail(msg, now, out);
        }
        if let Some(&bad) = data.labels().iter().find(|&&l| l >= task.model.output_dim) {
            self.client_id = Some(client_id);
            return self.fail(format!("label {bad} out of range for {} classes", task.model.output_dim), now, out);
        }
        if self.params.is_none() {
            match init_params(&task.model) {
                Ok(p) => self.params = Some(p),
                Err(e) => {
                    self.client_id = Some(client_id);
                    return self.fail(e.to_string(), now, out);
                }
            }
        }
        self.client_id = Some(client_id);
        self.spec = Some(task);
        self.stage = Stage::Idle;
    }

    fn federated(&self) -> bool {
        self.spec.as_ref().is_some_and(|s| s.scheme == Scheme::Federated)
    }

    fn on_round_start(&mut self, round: u64, global: Option<ParamVector>, now: u64, out: &mut Vec<Action>) {
        if self.spec.is_none() {
            return;
        }
        if self.federated() {
            let Some(global) = global else {
                return self.fail("federated RoundStart without a global model".into(), now, out);
            };
            if let Some((r, start, msg)) = &self.last_upload {
                if *r == round && *start == global {
                    // The round restarted after a pause; the update still applies.
                    let msg = msg.clone();
                    self.send(msg, now, out);
                    self.stage = Stage::Uploaded;
                    return;
                }
            }
            if let Stage::Training { round: r, start } = &self.stage {
                if *r == round && *start == global {
                    return;
                }
            }
            self.params = Some(global.clone());
            self.begin_training(round, global, out);
            return;
        }
        // Decentralized: (re)signal readiness for `round`.
        if round < self.round {
            return;
        }
        if round > self.round {
            if matches!(self.stage, Stage::Exchanging { .. }) {
                out.push(Action::ClosePeers { round: self.round });
            }
            self.round = round;
            self.stage = Stage::Idle;
        }
        match &self.stage {
            Stage::Ready { round: r, .. } if *r == round => self.send(Message::ReadySignal { round }, now, out),
            Stage::Training { round: r, .. } if *r == round => {}
            Stage::Exchanging { .. } | Stage::Finishing => {}
            _ => {
                let start = self.params.clone().expect("joined nodes hold parameters");
                self.begin_training(round, start, out);
            }
        }
    }

    fn on_global(&mut self, round: u64, params: ParamVector, out: &mut Vec<Action>) {
        let Some(spec) = self.spec.as_ref() else { return };
        if spec.scheme != Scheme::Federated {
            return;
        }
        let total = spec.total_rounds;
        self.params = Some(params.clone());
        self.last_aggregate = Some(params.clone());
        self.rounds_completed = round + 1;
        if round + 1 >= total {
            self.stage = Stage::Finishing;
        } else {
            self.begin_training(round + 1, params, out);
        }
    }

    /// A training job handed out earlier has finished.
    pub fn on_trained(&mut self, round: u64, outcome: Result<TrainOutcome, ModelError>, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        let Some((job_round, job_start)) = self.in_flight.take() else {
            return out;
        };
        debug_assert_eq!(job_round, round);
        let (want_round, want_start) = match &self.stage {
            Stage::Training { round, start } => (*round, start.clone()),
            _ => return out,
        };
        if want_round != job_round || want_start != job_start {
            self.launch(want_round, want_start, &mut out);
            return out;
        }
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                self.fail(format!("local training failed: {e}"), now, &mut out);
                return out;
            }
        };
        for m in &outcome.epochs {
            let record = MetricRecord {
                round,
                epoch: m.epoch + 1,
                loss: m.loss,
                accuracy: m.accuracy,
            };
            self.metrics.push(record);
            out.push(Action::Metrics(record));
            let msg = Message::MetricsReport {
                round,
                epoch: record.epoch,
                loss: record.loss,
                accuracy: record.accuracy,
            };
            self.send(msg, now, &mut out);
        }
        let delta = match self.privatized_delta(&want_start, &outcome.params, round) {
            Ok(d) => d,
            Err(e) => {
                self.fail(format!("cannot privatize update: {e}"), now, &mut out);
                return out;
            }
        };
        let samples = self.setup.data.len() as u64;
        if self.federated() {
            let msg = Message::UpdateUpload {
                round,
                payload: delta,
                sample_count: Some(samples),
            };
            self.last_upload = Some((round, want_start, msg.clone()));
            self.params = Some(outcome.params);
            self.send(msg, now, &mut out);
            self.stage = Stage::Uploaded;
        } else {
            let contribution = match want_start.add(&delta) {
                Ok(c) => c,
                Err(e) => {
                    self.fail(e.to_string(), now, &mut out);
                    return out;
                }
            };
            self.stage = Stage::Ready {
                round,
                local: outcome.params,
                contribution,
            };
            self.send(Message::ReadySignal { round }, now, &mut out);
        }
        out
    }

    fn on_peer_list(&mut self, round: u64, peers: Vec<PeerInfo>, now: u64, out: &mut Vec<Action>) {
        let Some(me) = self.client_id else { return };
        let (local, contribution) = match &self.stage {
            Stage::Ready {
                round: r,
                local,
                contribution,
            } if *r == round => (local.clone(), contribution.clone()),
            _ => return,
        };
        if !peers.iter().any(|p| p.client_id == me) {
            return;
        }
        let spec = self.spec.as_ref().expect("joined");
        let secure = if spec.secure_aggregation {
            let codec = FixedPointCodec::new(DEFAULT_SCALE_BITS).expect("default scale is valid");
            Some((codec, self.seed(SHARE_STREAM, round)))
        } else {
            None
        };
        let others: Vec<PeerInfo> = peers.iter().filter(|p| p.client_id != me).cloned().collect();
        let participants: BTreeSet<ClientId> = peers.iter().map(|p| p.client_id).collect();
        let (exchange, progress) = Exchange::start(
            round,
            me,
            participants,
            now + spec.round_deadline_ms(),
            spec.weighting,
            contribution,
            self.setup.data.len() as u64,
            secure,
        );
        if !others.is_empty() {
            let (dial, accept) = dial_plan(me, &others);
            out.push(Action::ConnectPeers { round, dial, accept });
        }
        self.stage = Stage::Exchanging {
            exchange: Box::new(exchange),
            local,
        };
        self.apply(progress, now, out);
        // Replay peer messages that arrived before the peer list.
        let early = self.early.remove(&round).unwrap_or_default();
        for (from, msg) in early {
            if !matches!(self.stage, Stage::Exchanging { .. }) {
                break;
            }
            self.feed(from, msg, now, out);
        }
        self.early.retain(|r, _| *r > round);
    }

    /// Processes one frame from a peer connection.
    pub fn on_peer(&mut self, from: ClientId, msg: Message, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        if matches!(self.stage, Stage::Done) {
            return out;
        }
        let Some(round) = msg.round() else { return out };
        if !matches!(msg, Message::PeerUpdate { .. } | Message::PeerShare { .. }) {
            return out;
        }
        match &self.stage {
            Stage::Exchanging { exchange, .. } if exchange.round == round => self.feed(from, msg, now, &mut out),
            _ if round >= self.round => self.early.entry(round).or_default().push((from, msg)),
            _ => {}
        }
        out
    }

    fn feed(&mut self, from: ClientId, msg: Message, now: u64, out: &mut Vec<Action>) {
        let Stage::Exchanging { exchange, .. } = &mut self.stage else { return };
        let progress = exchange.receive(from, msg);
        self.apply(progress, now, out);
    }

    fn apply(&mut self, progress: Progress, now: u64, out: &mut Vec<Action>) {
        match progress {
            Progress::Pending(send) => {
                out.extend(send.into_iter().map(|(to, message)| Action::SendPeer { to, message }));
            }
            Progress::Complete { aggregate, send } => {
                out.extend(send.into_iter().map(|(to, message)| Action::SendPeer { to, message }));
                self.end_exchange(Ok(aggregate), now, out);
            }
            Progress::Failed(reason) => self.end_exchange(Err(reason.to_string()), now, out),
        }
    }

    /// Closes the current exchange: adopt the aggregate, or keep the local
    /// model if the exchange failed, then move on to the next round.
    fn end_exchange(&mut self, result: Result<ParamVector, String>, now: u64, out: &mut Vec<Action>) {
        let Stage::Exchanging { exchange, local } = std::mem::replace(&mut self.stage, Stage::Idle) else {
            return;
        };
        let round = exchange.round;
        let completed = result.is_ok();
        match result {
            Ok(agg) => {
                self.last_aggregate = Some(agg.clone());
                self.params = Some(agg);
                self.rounds_completed += 1;
            }
            Err(reason) => {
                self.params = Some(local);
                self.rounds_failed += 1;
                self.exchange_failures.push((round, reason));
            }
        }
        out.push(Action::ClosePeers { round });
        self.send(Message::RoundReport { round, completed }, now, out);
        self.round = round + 1;
        let total = self.spec.as_ref().expect("joined").total_rounds;
        if self.round >= total {
            self.stage = Stage::Finishing;
        } else {
            let start = self.params.clone().expect("set above");
            self.begin_training(self.round, start, out);
        }
    }

    /// A peer connection could not be opened or was lost.
    pub fn peer_failed(&mut self, peer: ClientId, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        if let Stage::Exchanging { exchange, .. } = &self.stage {
            if exchange.awaits(peer) {
                self.end_exchange(Err(format!("lost connection to peer {peer}")), now, &mut out);
            }
        }
        out
    }

    /// Advances timers: heartbeats and the exchange deadline.
    pub fn tick(&mut self, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        if matches!(self.stage, Stage::Done) {
            return out;
        }
        if let Stage::Exchanging { exchange, .. } = &self.stage {
            if now >= exchange.deadline {
                self.end_exchange(Err("peer exchange deadline passed".into()), now, &mut out);
            }
        }
        if self.client_id.is_some() && now >= self.last_sent + self.setup.heartbeat_interval_ms {
            self.send(Message::Heartbeat {}, now, &mut out);
        }
        out
    }

    /// Earliest time at which [`Node::tick`] has work to do.
    pub fn next_wakeup(&self) -> Option<u64> {
        if matches!(self.stage, Stage::Done) {
            return None;
        }
        let heartbeat = self.client_id.map(|_| self.last_sent + self.setup.heartbeat_interval_ms);
        let deadline = match &self.stage {
            Stage::Exchanging { exchange, .. } => Some(exchange.deadline),
            _ => None,
        };
        heartbeat.into_iter().chain(deadline).min()
    }
}
