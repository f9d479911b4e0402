//! The coordinator state machine.
//!
//! [`Coordinator`] performs no I/O and reads no clock: callers feed it frames,
//! disconnects and ticks stamped with a millisecond time, and it returns the
//! frames to send. The tokio server and the simulation harness drive the same
//! machine; only the transport differs.

use std::collections::{BTreeMap, BTreeSet};

use colearn_core::aggregation::{fedavg, Contribution};
use colearn_core::model::{init_params, ModelError};
use colearn_core::task::{Scheme, TaskSpec, TaskSpecError};
use colearn_core::wire::{Envelope, Message, PeerInfo};
use colearn_core::{ClientId, ParamVector};
use thiserror::Error;

use crate::events::{SessionEvent, TimedEvent};
use crate::snapshot::{AggregationRecord, ClientSeries, EpochPoint, Phase, SessionSnapshot, TaskSummary};

/// Transport-level connection handle chosen by the caller.
pub type ConnId = u64;

pub const PAUSE_INSUFFICIENT: &str = "insufficient participants";
pub const PAUSE_NOT_READY: &str = "insufficient ready peers before the round deadline";
pub const PAUSE_OPERATOR: &str = "paused by operator";

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: ConnId,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Liveness {
    pub heartbeat_interval_ms: u64,
    /// Consecutive missed heartbeats after which a client counts as departed.
    pub missed_heartbeats: u64,
}

impl Default for Liveness {
    fn default() -> Self {
        Self {
            heartbeat_interval_ms: 10_000,
            missed_heartbeats: 3,
        }
    }
}

impl Liveness {
    pub fn timeout_ms(&self) -> u64 {
        self.heartbeat_interval_ms.saturating_mul(self.missed_heartbeats)
    }
}

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("task {0} already exists")]
    DuplicateTask(String),
    #[error(transparent)]
    InvalidSpec(#[from] TaskSpecError),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("invalid transition: {0}")]
    InvalidTransition(String),
    #[error("cannot initialize model: {0}")]
    Model(#[from] ModelError),
    #[error("restore failed: {0}")]
    Restore(String),
}

#[derive(Debug, Clone)]
struct Client {
    conn: ConnId,
    last_seen: u64,
    listen_address: Option<String>,
}

#[derive(Debug, Clone)]
struct Round {
    index: u64,
    deadline: u64,
    expected: BTreeSet<ClientId>,
    uploads: BTreeMap<ClientId, Contribution>,
    ready: BTreeSet<ClientId>,
    dispatched: BTreeSet<ClientId>,
    reports: BTreeMap<ClientId, bool>,
}

impl Round {
    fn new(index: u64, deadline: u64, expected: BTreeSet<ClientId>) -> Self {
        Self {
            index,
            deadline,
            expected,
            uploads: BTreeMap::new(),
            ready: BTreeSet::new(),
            dispatched: BTreeSet::new(),
            reports: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
struct Session {
    spec: TaskSpec,
    global: Option<ParamVector>,
    phase: Phase,
    round: u64,
    clients: BTreeMap<ClientId, Client>,
    next_client_id: ClientId,
    current: Option<Round>,
    /// Decentralized peers already ready for the round after the current one.
    carry_ready: BTreeSet<ClientId>,
    operator_paused: bool,
    pause_reason: Option<String>,
    /// Earliest time a tick may restart a session paused by a deadline.
    retry_at: u64,
    metrics: BTreeMap<ClientId, BTreeMap<u64, EpochPoint>>,
    aggregations: Vec<AggregationRecord>,
}

/// Per-call context: clock, outbox and event sink.
struct Ctx<'a> {
    now: u64,
    task_id: &'a str,
    out: &'a mut Vec<Outbound>,
    events: &'a mut Vec<TimedEvent>,
    departed_conns: Vec<ConnId>,
}

impl Ctx<'_> {
    fn send(&mut self, to: ConnId, msg: Message) {
        self.out.push(Outbound {
            to,
            envelope: Envelope::new(self.task_id, msg),
        });
    }

    fn emit(&mut self, event: SessionEvent) {
        self.events.push(TimedEvent {
            at_ms: self.now,
            task_id: self.task_id.to_string(),
            event,
        });
    }
}

impl Session {
    fn new(spec: TaskSpec) -> Result<Self, CoordinatorError> {
        let global = match spec.scheme {
            Scheme::Federated => Some(init_params(&spec.model)?),
            Scheme::Decentralized => {
                spec.model
                    .param_count()
                    .ok_or_else(|| ModelError::InvalidSpec("parameter count overflows".into()))?;
                None
            }
        };
        Ok(Self {
            spec,
            global,
            phase: Phase::WaitingForParticipants,
            round: 0,
            clients: BTreeMap::new(),
            next_client_id: 1,
            current: None,
            carry_ready: BTreeSet::new(),
            operator_paused: false,
            pause_reason: None,
            retry_at: 0,
            metrics: BTreeMap::new(),
            aggregations: Vec::new(),
        })
    }

    fn federated(&self) -> bool {
        self.spec.scheme == Scheme::Federated
    }

    fn broadcast(&self, ctx: &mut Ctx<'_>, msg: &Message) {
        for c in self.clients.values() {
            ctx.send(c.conn, msg.clone());
        }
    }

    /// Clients needed before a round may start.
    fn quorum(&self) -> usize {
        match self.spec.scheme {
            Scheme::Federated => self.spec.min_participants,
            Scheme::Decentralized => self.spec.min_participants.max(self.spec.ready_threshold),
        }
    }

    fn admit(&mut self, conn: ConnId, listen_address: Option<String>, ctx: &mut Ctx<'_>) -> Option<ClientId> {
        if self.phase == Phase::Finished {
            ctx.send(conn, Message::error("session_finished", format!("task {} has finished", ctx.task_id)));
            return None;
        }
        if !self.federated() && listen_address.is_none() {
            ctx.send(
                conn,
                Message::error("listen_address_required", "decentralized tasks need a peer listen address"),
            );
            return None;
        }
        let id = self.next_client_id;
        self.next_client_id += 1;
        self.clients.insert(
            id,
            Client {
                conn,
                last_seen: ctx.now,
                listen_address,
            },
        );
        ctx.send(
            conn,
            Message::Assigned {
                client_id: id,
                task: self.spec.clone(),
            },
        );
        ctx.emit(SessionEvent::ClientJoined {
            client_id: id,
            connected: self.clients.len(),
        });
        match self.phase {
            Phase::WaitingForParticipants => self.maybe_start(ctx),
            Phase::Training | Phase::Aggregating | Phase::PeerExchange => {
                if let Some(round) = self.current.as_mut() {
                    if self.spec.scheme == Scheme::Federated {
                        round.expected.insert(id);
                    }
                    let msg = Message::RoundStart {
                        round: round.index,
                        global_params: self.global.clone(),
                    };
                    ctx.send(conn, msg);
                }
            }
            Phase::Finished => {}
        }
        Some(id)
    }

    fn maybe_start(&mut self, ctx: &mut Ctx<'_>) {
        if self.phase != Phase::WaitingForParticipants || self.operator_paused {
            return;
        }
        if self.clients.len() < self.quorum() {
            self.pause_reason = Some(PAUSE_INSUFFICIENT.to_string());
            return;
        }
        self.start_round(ctx, true);
    }

    /// Opens round `self.round`. `announce` broadcasts RoundStart; rounds that
    /// follow a completed one are implied by GlobalUpdate (federated) or by the
    /// peers' own progression (decentralized).
    fn start_round(&mut self, ctx: &mut Ctx<'_>, announce: bool) {
        let expected: BTreeSet<ClientId> = self.clients.keys().copied().collect();
        let mut round = Round::new(self.round, ctx.now + self.spec.round_deadline_ms(), expected.clone());
        if !self.federated() {
            let carried = std::mem::take(&mut self.carry_ready);
            if !announce {
                round.ready = carried.intersection(&expected).copied().collect();
            }
        }
        self.current = Some(round);
        self.phase = Phase::Training;
        self.pause_reason = None;
        ctx.emit(SessionEvent::RoundStarted {
            round: self.round,
            expected: expected.into_iter().collect(),
        });
        if announce {
            let msg = Message::RoundStart {
                round: self.round,
                global_params: self.global.clone(),
            };
            self.broadcast(ctx, &msg);
        }
        if !self.federated() {
            self.maybe_dispatch(ctx);
        }
    }

    fn enter_waiting(&mut self, ctx: &mut Ctx<'_>, reason: &str, notify: bool) {
        self.phase = Phase::WaitingForParticipants;
        self.current = None;
        self.carry_ready.clear();
        self.pause_reason = Some(reason.to_string());
        ctx.emit(SessionEvent::Paused {
            round: self.round,
            reason: reason.to_string(),
        });
        if notify {
            let msg = Message::SessionPaused {
                reason: reason.to_string(),
            };
            self.broadcast(ctx, &msg);
        }
    }

    fn touch(&mut self, client: ClientId, now: u64) {
        if let Some(c) = self.clients.get_mut(&client) {
            c.last_seen = c.last_seen.max(now);
        }
    }

    fn on_upload(
        &mut self,
        client: ClientId,
        round_idx: u64,
        payload: ParamVector,
        sample_count: Option<u64>,
        ctx: &mut Ctx<'_>,
    ) {
        let conn = self.clients[&client].conn;
        if !self.federated() {
            ctx.send(conn, Message::error("unexpected_message", "decentralized tasks never upload updates"));
            return;
        }
        let reject = |ctx: &mut Ctx<'_>, code: &str, detail: String| {
            ctx.emit(SessionEvent::UpdateRejected {
                round: round_idx,
                client_id: client,
                code: code.to_string(),
            });
            ctx.send(conn, Message::error(code, detail));
        };
        let Some(round) = self.current.as_mut().filter(|r| self.phase == Phase::Training && r.index == round_idx)
        else {
            reject(ctx, "late_update", format!("round {round_idx} is not open; update dropped"));
            return;
        };
        if !round.expected.contains(&client) {
            reject(ctx, "late_update", format!("client {client} is not part of round {round_idx}"));
            return;
        }
        if round.uploads.contains_key(&client) {
            reject(ctx, "duplicate_update", format!("round {round_idx} already has an update from {client}"));
            return;
        }
        let global = self.global.as_ref().expect("federated sessions hold global params");
        if !payload.same_shape(global) {
            reject(ctx, "bad_update", "update does not match the task model manifest".into());
            return;
        }
        if sample_count == Some(0) {
            reject(ctx, "bad_update", "sampleCount must be positive".into());
            return;
        }
        round.uploads.insert(
            client,
            Contribution {
                client_id: client,
                round: round_idx,
                payload,
                sample_count,
            },
        );
        if round.uploads.len() == round.expected.len() {
            self.aggregate(ctx);
        }
    }

    fn aggregate(&mut self, ctx: &mut Ctx<'_>) {
        let round = self.current.take().expect("aggregate needs an open round");
        self.phase = Phase::Aggregating;
        let contribs: Vec<Contribution> = round.uploads.into_values().collect();
        let global = self.global.as_ref().expect("federated sessions hold global params");
        let next = fedavg(&contribs, self.spec.weighting)
            .map_err(|e| e.to_string())
            .and_then(|r| Ok((global.add(&r.global_update).map_err(|e| e.to_string())?, r.participants)))
            .and_then(|(g, p)| g.ensure_finite().map(|_| (g, p)).map_err(|e| e.to_string()));
        let (new_global, participants) = match next {
            Ok(v) => v,
            Err(e) => {
                self.enter_waiting(ctx, &format!("aggregation failed: {e}"), true);
                self.operator_paused = true;
                return;
            }
        };
        self.global = Some(new_global.clone());
        let done = round.index;
        self.round = done + 1;
        self.aggregations.push(AggregationRecord {
            round: done,
            at_ms: ctx.now,
            participants: participants.clone(),
        });
        ctx.emit(SessionEvent::Aggregated {
            round: done,
            participants: participants.clone(),
            global: Some(new_global.clone()),
        });
        let msg = Message::GlobalUpdate {
            round: done,
            params: new_global,
            participant_count: participants.len(),
        };
        self.broadcast(ctx, &msg);
        self.after_round(ctx);
    }

    /// Decides what follows a completed round.
    fn after_round(&mut self, ctx: &mut Ctx<'_>) {
        if self.round >= self.spec.total_rounds {
            self.phase = Phase::Finished;
            self.current = None;
            ctx.emit(SessionEvent::Finished { rounds: self.round });
            let msg = Message::SessionFinished { rounds: self.round };
            self.broadcast(ctx, &msg);
        } else if self.operator_paused {
            // Clients were told when the operator paused.
            self.enter_waiting(ctx, PAUSE_OPERATOR, false);
        } else if self.clients.len() < self.quorum() {
            self.enter_waiting(ctx, PAUSE_INSUFFICIENT, true);
        } else {
            self.start_round(ctx, false);
        }
    }

    fn on_ready(&mut self, client: ClientId, round_idx: u64, ctx: &mut Ctx<'_>) {
        let conn = self.clients[&client].conn;
        if self.federated() {
            ctx.send(conn, Message::error("unexpected_message", "federated tasks do not use ready signals"));
            return;
        }
        let Some(round) = self.current.as_mut() else {
            // Paused: the client re-signals when the round is restarted.
            return;
        };
        if round_idx == round.index && self.phase == Phase::Training {
            round.ready.insert(client);
            self.maybe_dispatch(ctx);
        } else if round_idx == round.index && self.phase == Phase::PeerExchange {
            if !round.dispatched.contains(&client) && self.carry_ready.insert(client) {
                ctx.emit(SessionEvent::ReadyDeferred {
                    round: round_idx,
                    client_id: client,
                });
            }
        } else if round_idx == round.index + 1 {
            self.carry_ready.insert(client);
        }
    }

    fn maybe_dispatch(&mut self, ctx: &mut Ctx<'_>) {
        let Some(round) = self.current.as_mut() else { return };
        if self.phase != Phase::Training || round.ready.len() < self.spec.ready_threshold {
            return;
        }
        round.dispatched = round.ready.clone();
        round.deadline = ctx.now + self.spec.round_deadline_ms();
        let peers: Vec<PeerInfo> = round
            .dispatched
            .iter()
            .map(|id| PeerInfo {
                client_id: *id,
                address: self.clients[id].listen_address.clone().unwrap_or_default(),
            })
            .collect();
        let msg = Message::PeerList {
            round: round.index,
            peers,
        };
        let targets: Vec<ConnId> = round.dispatched.iter().map(|id| self.clients[id].conn).collect();
        ctx.emit(SessionEvent::PeersDispatched {
            round: round.index,
            peers: round.dispatched.iter().copied().collect(),
        });
        self.phase = Phase::PeerExchange;
        for conn in targets {
            ctx.send(conn, msg.clone());
        }
    }

    fn on_report(&mut self, client: ClientId, round_idx: u64, completed: bool, ctx: &mut Ctx<'_>) {
        let Some(round) = self.current.as_mut() else { return };
        if self.phase != Phase::PeerExchange || round.index != round_idx || !round.dispatched.contains(&client) {
            return;
        }
        round.reports.entry(client).or_insert(completed);
        if round.dispatched.iter().all(|id| round.reports.contains_key(id)) {
            self.close_exchange(ctx);
        }
    }

    fn close_exchange(&mut self, ctx: &mut Ctx<'_>) {
        let round = self.current.take().expect("close needs an open round");
        let completed: Vec<ClientId> = round.reports.iter().filter(|(_, ok)| **ok).map(|(id, _)| *id).collect();
        let failed: Vec<ClientId> = round
            .dispatched
            .iter()
            .filter(|id| round.reports.get(id) != Some(&true))
            .copied()
            .collect();
        self.round = round.index + 1;
        self.aggregations.push(AggregationRecord {
            round: round.index,
            at_ms: ctx.now,
            participants: round.dispatched.iter().copied().collect(),
        });
        ctx.emit(SessionEvent::RoundClosed {
            round: round.index,
            completed,
            failed,
        });
        self.after_round(ctx);
    }

    fn on_metrics(&mut self, client: ClientId, round: u64, epoch: u64, loss: f64, accuracy: f64, ctx: &mut Ctx<'_>) {
        if !(loss.is_finite() && accuracy.is_finite()) {
            let conn = self.clients[&client].conn;
            ctx.send(conn, Message::error("bad_metrics", "loss and accuracy must be finite"));
            return;
        }
        let point = EpochPoint {
            round,
            epoch,
            loss,
            accuracy,
        };
        self.metrics.entry(client).or_default().insert(epoch, point);
        ctx.emit(SessionEvent::Metric {
            client_id: client,
            round,
            epoch,
            loss,
            accuracy,
        });
    }

    fn depart(&mut self, client: ClientId, reason: &str, ctx: &mut Ctx<'_>) {
        let Some(c) = self.clients.remove(&client) else { return };
        ctx.departed_conns.push(c.conn);
        self.carry_ready.remove(&client);
        ctx.emit(SessionEvent::ClientDeparted {
            client_id: client,
            reason: reason.to_string(),
            connected: self.clients.len(),
        });
        let Some(round) = self.current.as_mut() else { return };
        round.expected.remove(&client);
        round.ready.remove(&client);
        match self.phase {
            Phase::Training if self.clients.len() < self.spec.min_participants => {
                self.enter_waiting(ctx, PAUSE_INSUFFICIENT, true);
            }
            Phase::Training if self.spec.scheme == Scheme::Federated => {
                round.uploads.remove(&client);
                if !round.expected.is_empty() && round.uploads.len() == round.expected.len() {
                    self.aggregate(ctx);
                }
            }
            Phase::PeerExchange if round.dispatched.contains(&client) => {
                round.reports.entry(client).or_insert(false);
                if round.dispatched.iter().all(|id| round.reports.contains_key(id)) {
                    self.close_exchange(ctx);
                }
            }
            _ => {}
        }
    }

    fn tick(&mut self, ctx: &mut Ctx<'_>, liveness: &Liveness) {
        if self.phase == Phase::Finished {
            return;
        }
        let timeout = liveness.timeout_ms();
        let stale: Vec<ClientId> = self
            .clients
            .iter()
            .filter(|(_, c)| ctx.now.saturating_sub(c.last_seen) > timeout)
            .map(|(id, _)| *id)
            .collect();
        for id in stale {
            let conn = self.clients[&id].conn;
            ctx.send(conn, Message::error("departed", "missed heartbeats; rejoin to continue"));
            self.depart(id, "missed heartbeats", ctx);
        }
        if self.phase == Phase::WaitingForParticipants && ctx.now >= self.retry_at {
            self.maybe_start(ctx);
            return;
        }
        let Some(round) = self.current.as_ref() else { return };
        if ctx.now < round.deadline {
            return;
        }
        match self.phase {
            Phase::Training if self.federated() => {
                if round.uploads.len() >= self.spec.min_participants {
                    let received: BTreeSet<ClientId> = round.uploads.keys().copied().collect();
                    self.current.as_mut().unwrap().expected = received;
                    self.aggregate(ctx);
                } else {
                    self.retry_at = ctx.now + liveness.heartbeat_interval_ms;
                    self.enter_waiting(ctx, PAUSE_INSUFFICIENT, true);
                }
            }
            Phase::Training => {
                self.retry_at = ctx.now + liveness.heartbeat_interval_ms;
                self.enter_waiting(ctx, PAUSE_NOT_READY, true);
            }
            Phase::PeerExchange => self.close_exchange(ctx),
            _ => {}
        }
    }

    fn next_wakeup(&self, liveness: &Liveness) -> Option<u64> {
        if self.phase == Phase::Finished {
            return None;
        }
        let heartbeat = self.clients.values().map(|c| c.last_seen + liveness.timeout_ms() + 1).min();
        let phase = match (&self.current, self.phase) {
            (Some(r), Phase::Training | Phase::PeerExchange) => Some(r.deadline),
            (_, Phase::WaitingForParticipants) if !self.operator_paused && self.clients.len() >= self.quorum() => {
                Some(self.retry_at)
            }
            _ => None,
        };
        heartbeat.into_iter().chain(phase).min()
    }

    fn snapshot(&self, task_id: &str) -> SessionSnapshot {
        SessionSnapshot {
            task_id: task_id.to_string(),
            title: self.spec.title.clone(),
            description: self.spec.description.clone(),
            scheme: self.spec.scheme,
            secure_aggregation: self.spec.secure_aggregation,
            weighting: self.spec.weighting,
            phase: self.phase,
            current_round: self.round,
            total_rounds: self.spec.total_rounds,
            epochs_per_round: self.spec.train.epochs_per_round,
            min_participants: self.spec.min_participants,
            ready_threshold: self.spec.ready_threshold,
            participant_count: self.clients.len(),
            clients: self.clients.keys().copied().collect(),
            paused_by_operator: self.operator_paused,
            pause_reason: self.pause_reason.clone(),
            series: self
                .metrics
                .iter()
                .map(|(id, pts)| ClientSeries {
                    client_id: *id,
                    points: pts.values().copied().collect(),
                })
                .collect(),
            aggregations: self.aggregations.clone(),
        }
    }

    fn check(&self, task_id: &str) -> Result<(), String> {
        let fail = |m: String| Err(format!("task {task_id}: {m}"));
        if self.phase == Phase::Training && self.clients.len() < self.spec.min_participants {
            return fail(format!(
                "training with {} connected, below minParticipants {}",
                self.clients.len(),
                self.spec.min_participants
            ));
        }
        if self.round > self.spec.total_rounds {
            return fail(format!("round {} beyond totalRounds {}", self.round, self.spec.total_rounds));
        }
        if self.phase == Phase::Finished && self.round != self.spec.total_rounds {
            return fail("finished before the last round".into());
        }
        match (&self.current, self.phase) {
            (None, Phase::Training | Phase::PeerExchange) => return fail("active phase without a round".into()),
            (Some(_), Phase::WaitingForParticipants | Phase::Finished) => {
                return fail("idle phase with an open round".into())
            }
            _ => {}
        }
        if let Some(r) = &self.current {
            if r.index != self.round {
                return fail(format!("open round {} differs from current round {}", r.index, self.round));
            }
            if !r.uploads.keys().all(|id| r.expected.contains(id)) {
                return fail("received updates from unexpected clients".into());
            }
            if r.uploads.values().any(|c| c.round != r.index) {
                return fail("contribution carries another round's index".into());
            }
            if !r.ready.iter().all(|id| self.clients.contains_key(id)) {
                return fail("ready set contains departed clients".into());
            }
        }
        Ok(())
    }
}

/// State of one task, captured for restart.
#[derive(Debug, Clone)]
pub struct RestoredTask {
    pub spec: TaskSpec,
    pub next_round: u64,
    pub next_client_id: ClientId,
    pub finished: bool,
}

/// All sessions hosted by one server.
#[derive(Debug, Clone, Default)]
pub struct Coordinator {
    liveness: Liveness,
    sessions: BTreeMap<String, Session>,
    conns: BTreeMap<ConnId, (String, ClientId)>,
    events: Vec<TimedEvent>,
}

impl Coordinator {
    pub fn new(liveness: Liveness) -> Self {
        Self {
            liveness,
            ..Self::default()
        }
    }

    pub fn liveness(&self) -> Liveness {
        self.liveness
    }

    fn with_session<R>(
        &mut self,
        task_id: &str,
        now: u64,
        f: impl FnOnce(&mut Session, &mut Ctx<'_>, &Liveness) -> R,
    ) -> Option<(R, Vec<Outbound>)> {
        let liveness = self.liveness;
        let session = self.sessions.get_mut(task_id)?;
        let mut out = Vec::new();
        let mut ctx = Ctx {
            now,
            task_id,
            out: &mut out,
            events: &mut self.events,
            departed_conns: Vec::new(),
        };
        let r = f(session, &mut ctx, &liveness);
        for conn in std::mem::take(&mut ctx.departed_conns) {
            self.conns.remove(&conn);
        }
        Some((r, out))
    }

    /// Registers a task. Initial global parameters come from the model seed.
    pub fn create_task(&mut self, spec: TaskSpec, now: u64) -> Result<TaskSummary, CoordinatorError> {
        spec.validate()?;
        if self.sessions.contains_key(&spec.task_id) {
            return Err(CoordinatorError::DuplicateTask(spec.task_id));
        }
        let session = Session::new(spec.clone())?;
        let id = spec.task_id.clone();
        self.events.push(TimedEvent {
            at_ms: now,
            task_id: id.clone(),
            event: SessionEvent::TaskCreated { spec },
        });
        let summary = session.snapshot(&id).summary();
        self.sessions.insert(id, session);
        Ok(summary)
    }

    pub fn list_tasks(&self) -> Vec<TaskSummary> {
        self.sessions.iter().map(|(id, s)| s.snapshot(id).summary()).collect()
    }

    pub fn snapshot(&self, task_id: &str) -> Result<SessionSnapshot, CoordinatorError> {
        self.sessions
            .get(task_id)
            .map(|s| s.snapshot(task_id))
            .ok_or_else(|| CoordinatorError::UnknownTask(task_id.to_string()))
    }

    /// Current global model of a federated task.
    pub fn global_params(&self, task_id: &str) -> Option<&ParamVector> {
        self.sessions.get(task_id)?.global.as_ref()
    }

    /// Client bound to a connection, if it has joined.
    pub fn client_of(&self, conn: ConnId) -> Option<(&str, ClientId)> {
        self.conns.get(&conn).map(|(t, c)| (t.as_str(), *c))
    }

    /// Drains events produced since the last call.
    pub fn take_events(&mut self) -> Vec<TimedEvent> {
        std::mem::take(&mut self.events)
    }

    /// Processes one frame received on `conn`.
    pub fn handle(&mut self, conn: ConnId, env: Envelope, now: u64) -> Vec<Outbound> {
        let task_id = env.task_id;
        let reply = |code: &str, detail: String| {
            vec![Outbound {
                to: conn,
                envelope: Envelope::new(task_id.as_str(), Message::error(code, detail)),
            }]
        };
        let Some((bound_task, client)) = self.conns.get(&conn).cloned() else {
            return match env.body {
                Message::JoinTask { listen_address, .. } => {
                    if !self.sessions.contains_key(&task_id) {
                        return reply("unknown_task", format!("no task named {task_id}"));
                    }
                    let (id, out) = self
                        .with_session(&task_id, now, |s, ctx, _| s.admit(conn, listen_address, ctx))
                        .expect("session exists");
                    if let Some(id) = id {
                        self.conns.insert(conn, (task_id.clone(), id));
                    }
                    out
                }
                Message::Heartbeat {} | Message::Leave {} => Vec::new(),
                other => reply("not_joined", format!("{} before JoinTask", other.kind())),
            };
        };
        if bound_task != task_id {
            return reply("task_mismatch", format!("connection is bound to task {bound_task}"));
        }
        let kind = env.body.kind();
        self.with_session(&task_id, now, |s, ctx, _| {
            s.touch(client, now);
            match env.body {
                Message::UpdateUpload {
                    round,
                    payload,
                    sample_count,
                } => s.on_upload(client, round, payload, sample_count, ctx),
                Message::ReadySignal { round } => s.on_ready(client, round, ctx),
                Message::RoundReport { round, completed } => s.on_report(client, round, completed, ctx),
                Message::MetricsReport {
                    round,
                    epoch,
                    loss,
                    accuracy,
                } => s.on_metrics(client, round, epoch, loss, accuracy, ctx),
                Message::Leave {} => s.depart(client, "left", ctx),
                Message::Heartbeat {} => {}
                Message::JoinTask { .. } => {
                    let conn = s.clients[&client].conn;
                    ctx.send(conn, Message::error("already_joined", format!("connection already joined as {client}")));
                }
                _ => {
                    let conn = s.clients[&client].conn;
                    ctx.send(conn, Message::error("unexpected_message", format!("{kind} is not accepted by the server")));
                }
            }
        })
        .map(|(_, out)| out)
        .unwrap_or_default()
    }

    /// The transport lost `conn` (closed socket or crashed peer).
    pub fn disconnect(&mut self, conn: ConnId, now: u64) -> Vec<Outbound> {
        let Some((task_id, client)) = self.conns.get(&conn).cloned() else {
            return Vec::new();
        };
        self.with_session(&task_id, now, |s, ctx, _| s.depart(client, "disconnected", ctx))
            .map(|(_, out)| out)
            .unwrap_or_default()
    }

    /// Advances timers: heartbeat expiry, round deadlines and restarts.
    pub fn tick(&mut self, now: u64) -> Vec<Outbound> {
        let ids: Vec<String> = self.sessions.keys().cloned().collect();
        let mut all = Vec::new();
        for id in ids {
            if let Some((_, out)) = self.with_session(&id, now, |s, ctx, l| s.tick(ctx, l)) {
                all.extend(out);
            }
        }
        all
    }

    /// Earliest time at which [`Coordinator::tick`] has work to do.
    pub fn next_wakeup(&self) -> Option<u64> {
        self.sessions.values().filter_map(|s| s.next_wakeup(&self.liveness)).min()
    }

    /// Operator pause: stops the current round and tells every client.
    pub fn pause(&mut self, task_id: &str, now: u64) -> Result<Vec<Outbound>, CoordinatorError> {
        let (r, out) = self
            .with_session(task_id, now, |s, ctx, _| {
                if s.phase == Phase::Finished {
                    return Err(CoordinatorError::InvalidTransition("session has finished".into()));
                }
                if s.operator_paused {
                    return Err(CoordinatorError::InvalidTransition("session is already paused".into()));
                }
                s.operator_paused = true;
                ctx.emit(SessionEvent::OperatorPaused { round: s.round });
                match s.phase {
                    Phase::Training | Phase::Aggregating => s.enter_waiting(ctx, PAUSE_OPERATOR, true),
                    _ => {
                        // A dispatched peer exchange runs to completion; the
                        // session then stays in WaitingForParticipants.
                        s.pause_reason = Some(PAUSE_OPERATOR.to_string());
                        let msg = Message::SessionPaused {
                            reason: PAUSE_OPERATOR.to_string(),
                        };
                        s.broadcast(ctx, &msg);
                    }
                }
                Ok(())
            })
            .ok_or_else(|| CoordinatorError::UnknownTask(task_id.to_string()))?;
        r.map(|_| out)
    }

    /// Operator resume: restarts the round if enough clients are connected,
    /// otherwise the session stays paused for lack of participants.
    pub fn resume(&mut self, task_id: &str, now: u64) -> Result<Vec<Outbound>, CoordinatorError> {
        let (r, out) = self
            .with_session(task_id, now, |s, ctx, _| {
                if s.phase == Phase::Finished {
                    return Err(CoordinatorError::InvalidTransition("session has finished".into()));
                }
                if !s.operator_paused {
                    return Err(CoordinatorError::InvalidTransition("session is not paused".into()));
                }
                s.operator_paused = false;
                ctx.emit(SessionEvent::OperatorResumed { round: s.round });
                if s.phase == Phase::PeerExchange {
                    s.pause_reason = None;
                } else {
                    s.maybe_start(ctx);
                }
                Ok(())
            })
            .ok_or_else(|| CoordinatorError::UnknownTask(task_id.to_string()))?;
        r.map(|_| out)
    }

    /// Checks the session invariants; the simulation harness calls this after
    /// every step.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (id, s) in &self.sessions {
            s.check(id)?;
        }
        for (conn, (task, client)) in &self.conns {
            let bound = self.sessions.get(task).and_then(|s| s.clients.get(client));
            if bound.map(|c| c.conn) != Some(*conn) {
                return Err(format!("connection {conn} bound to missing client {client} of {task}"));
            }
        }
        Ok(())
    }

    /// Rebuilds a coordinator from journaled events after a restart. The round
    /// that was in flight restarts from its beginning once clients rejoin.
    /// `checkpoints` supplies the latest global model of each federated task.
    pub fn restore(
        liveness: Liveness,
        events: impl IntoIterator<Item = TimedEvent>,
        mut checkpoints: BTreeMap<String, ParamVector>,
    ) -> Result<Self, CoordinatorError> {
        let mut c = Coordinator::new(liveness);
        for ev in events {
            let id = ev.task_id.clone();
            if let SessionEvent::TaskCreated { spec } = &ev.event {
                if c.sessions.contains_key(&id) {
                    return Err(CoordinatorError::Restore(format!("task {id} created twice")));
                }
                c.sessions.insert(id, Session::new(spec.clone())?);
                continue;
            }
            let s = c
                .sessions
                .get_mut(&id)
                .ok_or_else(|| CoordinatorError::Restore(format!("event for unknown task {id}")))?;
            match ev.event {
                SessionEvent::ClientJoined { client_id, .. } => {
                    s.next_client_id = s.next_client_id.max(client_id + 1);
                }
                SessionEvent::Aggregated { round, participants, .. } => {
                    s.round = round + 1;
                    s.aggregations.push(AggregationRecord {
                        round,
                        at_ms: ev.at_ms,
                        participants,
                    });
                }
                SessionEvent::RoundClosed { round, completed, failed } => {
                    s.round = round + 1;
                    let mut participants: Vec<ClientId> = completed.into_iter().chain(failed).collect();
                    participants.sort_unstable();
                    s.aggregations.push(AggregationRecord {
                        round,
                        at_ms: ev.at_ms,
                        participants,
                    });
                }
                SessionEvent::Metric {
                    client_id,
                    round,
                    epoch,
                    loss,
                    accuracy,
                } => {
                    s.metrics.entry(client_id).or_default().insert(
                        epoch,
                        EpochPoint {
                            round,
                            epoch,
                            loss,
                            accuracy,
                        },
                    );
                }
                SessionEvent::OperatorPaused { .. } => s.operator_paused = true,
                SessionEvent::OperatorResumed { .. } => s.operator_paused = false,
                SessionEvent::Finished { .. } => s.phase = Phase::Finished,
                _ => {}
            }
        }
        for (id, s) in &mut c.sessions {
            if s.federated() && s.round > 0 {
                let params = checkpoints
                    .remove(id)
                    .ok_or_else(|| CoordinatorError::Restore(format!("missing checkpoint for task {id}")))?;
                if !params.same_shape(s.global.as_ref().expect("federated sessions hold global params")) {
                    return Err(CoordinatorError::Restore(format!("checkpoint for {id} does not match its model")));
                }
                s.global = Some(params);
            }
            if s.phase != Phase::Finished {
                s.pause_reason = Some(if s.operator_paused { PAUSE_OPERATOR } else { PAUSE_INSUFFICIENT }.to_string());
            }
        }
        Ok(c)
    }

    /// Per-task restart state (for diagnostics and tests).
    pub fn restored_tasks(&self) -> Vec<RestoredTask> {
        self.sessions
            .values()
            .map(|s| RestoredTask {
                spec: s.spec.clone(),
                next_round: s.round,
                next_client_id: s.next_client_id,
                finished: s.phase == Phase::Finished,
            })
            .collect()
    }
}
