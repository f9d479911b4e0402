//! The event loop: production coordinator and node state machines joined by
//! a simulated network in logical time.
//!
//! Every frame is encoded with the real codec when sent and decoded when
//! delivered. Each directed link delivers in send order: a frame never
//! arrives before one sent earlier on the same link, even if the link's delay
//! shrank in between. Events at the same logical time run in scheduling
//! order, so a run is a pure function of the scenario.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use colearn_coordinator::{ConnId, Coordinator, CoordinatorError, Liveness, Outbound, SessionEvent};
use colearn_core::data::Dataset;
use colearn_core::rng::derive_key;
use colearn_core::task::TaskSpec;
use colearn_core::wire::{decode_msg, encode_msg, Envelope, Message};
use colearn_core::{ClientId, ParamVector};
use colearn_node::{evaluate, Action, Finish, Node, NodeSetup, Randomness, TrainJob};
use thiserror::Error;

use crate::report::{ClientEpoch, ClientRecord, ExperimentReport, RoundRecord, TimelineEntry, REPORT_VERSION};
use crate::scenario::{ClientData, FaultEvent, NetworkConfig, Scenario, ScenarioError, Trigger};

/// Peers that completed the same exchange averaged the same inputs; only
/// summation order can separate their results.
const PEER_AGREEMENT: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("cannot create the task: {0}")]
    Task(#[from] CoordinatorError),
    #[error("invariant violated at t={at_ms} ms: {detail}")]
    Invariant { at_ms: u64, detail: String },
}

/// A party on the simulated network. A client that drops out and rejoins
/// comes back as a new incarnation with a new connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Coordinator,
    Client { slot: usize, incarnation: u32 },
}

/// A frame as it leaves its sender.
#[derive(Debug)]
pub struct Frame<'a> {
    pub at_ms: u64,
    pub from: Endpoint,
    pub to: Endpoint,
    /// The encoded frame, length prefix included.
    pub bytes: &'a [u8],
    pub envelope: &'a Envelope,
}

/// Observes every frame sent during a run.
pub trait FrameTap {
    fn on_frame(&mut self, frame: &Frame<'_>);
}

/// Observes nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoTap;

impl FrameTap for NoTap {
    fn on_frame(&mut self, _: &Frame<'_>) {}
}

/// A frame kept by [`FrameLog`].
#[derive(Debug, Clone)]
pub struct LoggedFrame {
    pub at_ms: u64,
    pub from: Endpoint,
    pub to: Endpoint,
    pub kind: &'static str,
    pub carries_model_payload: bool,
    pub bytes: Vec<u8>,
}

impl LoggedFrame {
    pub fn touches_coordinator(&self) -> bool {
        self.from == Endpoint::Coordinator || self.to == Endpoint::Coordinator
    }
}

/// Keeps a copy of every frame.
#[derive(Debug, Default, Clone)]
pub struct FrameLog {
    pub frames: Vec<LoggedFrame>,
}

impl FrameTap for FrameLog {
    fn on_frame(&mut self, f: &Frame<'_>) {
        self.frames.push(LoggedFrame {
            at_ms: f.at_ms,
            from: f.from,
            to: f.to,
            kind: f.envelope.body.kind(),
            carries_model_payload: f.envelope.body.carries_model_payload(),
            bytes: f.bytes.to_vec(),
        });
    }
}

#[derive(Debug)]
enum Event {
    Deliver {
        from: Endpoint,
        to: Endpoint,
        seq: u64,
        bytes: Vec<u8>,
    },
    Trained {
        slot: usize,
        incarnation: u32,
        job: Box<TrainJob>,
    },
    /// A dial to a peer that is gone fails after a round trip.
    DialFailed {
        slot: usize,
        incarnation: u32,
        peer: ClientId,
    },
    NodeWake {
        slot: usize,
        incarnation: u32,
    },
    CoordinatorWake,
    Fault(usize),
}

struct Scheduled {
    at: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap and the earliest event must pop first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug, Default)]
struct Link {
    next_send: u64,
    next_delivery: u64,
    /// Latest scheduled delivery; later frames may not overtake it.
    last_at: u64,
}

struct Slot {
    data: Arc<Dataset>,
    incarnation: u32,
    conn: ConnId,
    node: Option<Node>,
    delay_ms: u64,
    wakes: BTreeSet<u64>,
    client_ids: Vec<ClientId>,
    epochs: Vec<ClientEpoch>,
    /// Totals of earlier incarnations.
    rounds_completed: u64,
    rounds_failed: u64,
    outcome: String,
}

/// A running simulation. Drive it with [`Simulation::step`] to inspect state
/// between events, or call [`Simulation::run`].
pub struct Simulation<T: FrameTap = NoTap> {
    name: String,
    seed: u64,
    spec: TaskSpec,
    net: NetworkConfig,
    faults: Vec<(Trigger, usize, FaultEvent)>,
    fired: Vec<bool>,
    holdout: Dataset,
    now: u64,
    next_seq: u64,
    queue: BinaryHeap<Scheduled>,
    coordinator: Coordinator,
    coordinator_wakes: BTreeSet<u64>,
    slots: Vec<Slot>,
    next_conn: ConnId,
    conns: BTreeMap<ConnId, (usize, u32)>,
    clients: BTreeMap<ClientId, (usize, u32)>,
    links: BTreeMap<(Endpoint, Endpoint), Link>,
    /// Aggregates reported by decentralized peers, by (round, client).
    peer_aggregates: BTreeMap<(u64, ClientId), ParamVector>,
    rounds: Vec<RoundRecord>,
    final_params: Option<ParamVector>,
    message_counts: BTreeMap<String, u64>,
    coordinator_counts: BTreeMap<String, u64>,
    dropped_frames: u64,
    timeline: Vec<TimelineEntry>,
    session_finished: bool,
    tap: T,
}

/// Loads the scenario's data and runs it to the end.
pub fn run_scenario(scenario: &Scenario) -> Result<ExperimentReport, SimError> {
    let data = scenario.materialize()?;
    Simulation::new(scenario, data)?.run()
}

impl Simulation<NoTap> {
    pub fn new(scenario: &Scenario, data: ClientData) -> Result<Self, SimError> {
        Simulation::with_tap(scenario, data, NoTap)
    }
}

impl<T: FrameTap> Simulation<T> {
    pub fn with_tap(scenario: &Scenario, data: ClientData, tap: T) -> Result<Self, SimError> {
        scenario.validate()?;
        if data.shards.len() != scenario.num_clients {
            return Err(ScenarioError::Invalid(format!(
                "{} data shards for {} clients",
                data.shards.len(),
                scenario.num_clients
            ))
            .into());
        }
        let mut coordinator = Coordinator::new(Liveness::default());
        coordinator.create_task(scenario.task.clone(), 0)?;
        let faults: Vec<_> = scenario.faults.iter().map(|f| (f.at, f.client, f.event)).collect();
        let mut sim = Simulation {
            name: scenario.name.clone(),
            seed: scenario.seed,
            spec: scenario.task.clone(),
            net: scenario.network,
            fired: vec![false; faults.len()],
            faults,
            holdout: data.holdout,
            now: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            coordinator,
            coordinator_wakes: BTreeSet::new(),
            slots: Vec::new(),
            next_conn: 1,
            conns: BTreeMap::new(),
            clients: BTreeMap::new(),
            links: BTreeMap::new(),
            peer_aggregates: BTreeMap::new(),
            rounds: Vec::new(),
            final_params: None,
            message_counts: BTreeMap::new(),
            coordinator_counts: BTreeMap::new(),
            dropped_frames: 0,
            timeline: Vec::new(),
            session_finished: false,
            tap,
        };
        sim.absorb_coordinator_events()?;
        for i in 0..sim.faults.len() {
            if let Trigger::TimeMs(t) = sim.faults[i].0 {
                sim.schedule(t, Event::Fault(i));
            }
        }
        for (slot, shard) in data.shards.into_iter().enumerate() {
            sim.slots.push(Slot {
                data: Arc::new(shard),
                incarnation: 0,
                conn: 0,
                node: None,
                delay_ms: 0,
                wakes: BTreeSet::new(),
                client_ids: Vec::new(),
                epochs: Vec::new(),
                rounds_completed: 0,
                rounds_failed: 0,
                outcome: "running".into(),
            });
            sim.start_client(slot)?;
        }
        Ok(sim)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coordinator
    }

    /// The live node in `slot`, if it has not dropped out.
    pub fn node(&self, slot: usize) -> Option<&Node> {
        self.slots.get(slot)?.node.as_ref()
    }

    pub fn tap(&self) -> &T {
        &self.tap
    }

    /// Processes the next event. Returns `false` once nothing is left to do
    /// or the time limit is reached.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let Some(next) = self.queue.pop() else {
            return Ok(false);
        };
        if next.at > self.net.max_time_ms {
            self.note(format!("time limit of {} ms reached", self.net.max_time_ms));
            self.queue.clear();
            return Ok(false);
        }
        self.now = next.at;
        match next.event {
            Event::Deliver { from, to, seq, bytes } => self.deliver(from, to, seq, &bytes)?,
            Event::Trained { slot, incarnation, job } => {
                if self.is_live(slot, incarnation) {
                    let outcome = job.run();
                    let now = self.now;
                    let actions = self.node_mut(slot).on_trained(job.round, outcome, now);
                    self.apply(slot, actions)?;
                }
            }
            Event::DialFailed { slot, incarnation, peer } => {
                if self.is_live(slot, incarnation) {
                    let now = self.now;
                    let actions = self.node_mut(slot).peer_failed(peer, now);
                    self.apply(slot, actions)?;
                }
            }
            Event::NodeWake { slot, incarnation } => {
                if self.is_live(slot, incarnation) {
                    self.slots[slot].wakes.remove(&self.now);
                    let now = self.now;
                    let due = self.slots[slot].node.as_ref().and_then(Node::next_wakeup).is_some_and(|t| t <= now);
                    if due {
                        let actions = self.node_mut(slot).tick(now);
                        self.apply(slot, actions)?;
                    } else {
                        self.schedule_node_wake(slot);
                    }
                }
            }
            Event::CoordinatorWake => {
                self.coordinator_wakes.remove(&self.now);
                if self.coordinator.next_wakeup().is_some_and(|t| t <= self.now) {
                    let out = self.coordinator.tick(self.now);
                    self.after_coordinator(out)?;
                } else {
                    self.schedule_coordinator_wake();
                }
            }
            Event::Fault(i) => self.fire_fault(i)?,
        }
        Ok(true)
    }

    /// Runs to the end and builds the report.
    pub fn run(self) -> Result<ExperimentReport, SimError> {
        self.run_with_tap().map(|(report, _)| report)
    }

    /// Runs to the end and also returns the tap.
    pub fn run_with_tap(mut self) -> Result<(ExperimentReport, T), SimError> {
        while self.step()? {}
        let report = self.report();
        Ok((report, self.tap))
    }

    fn report(&self) -> ExperimentReport {
        let clients = self
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (done, failed) = s.node.as_ref().map_or((0, 0), |n| {
                    let r = n.report();
                    (r.rounds_completed, r.rounds_failed)
                });
                ClientRecord {
                    slot: i,
                    samples: s.data.len(),
                    client_ids: s.client_ids.clone(),
                    epochs: s.epochs.clone(),
                    rounds_completed: s.rounds_completed + done,
                    rounds_failed: s.rounds_failed + failed,
                    outcome: s.outcome.clone(),
                }
            })
            .collect();
        let (final_loss, final_accuracy) = self
            .rounds
            .iter()
            .rev()
            .find(|r| r.loss.is_some())
            .map_or((None, None), |r| (r.loss, r.accuracy));
        ExperimentReport {
            schema_version: REPORT_VERSION,
            scenario: self.name.clone(),
            scheme: self.spec.scheme,
            secure_aggregation: self.spec.secure_aggregation,
            seed: self.seed,
            total_rounds: self.spec.total_rounds,
            rounds_completed: self.rounds.len() as u64,
            session_finished: self.session_finished,
            finished_at_ms: self.now,
            rounds: self.rounds.clone(),
            clients,
            message_counts: self.message_counts.clone(),
            coordinator_message_counts: self.coordinator_counts.clone(),
            dropped_frames: self.dropped_frames,
            timeline: self.timeline.clone(),
            final_params: self.final_params.clone(),
            final_loss,
            final_accuracy,
        }
    }

    fn schedule(&mut self, at: u64, event: Event) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Scheduled { at, seq, event });
    }

    fn note(&mut self, event: String) {
        self.timeline.push(TimelineEntry { at_ms: self.now, event });
    }

    fn is_live(&self, slot: usize, incarnation: u32) -> bool {
        let s = &self.slots[slot];
        s.incarnation == incarnation && s.node.is_some()
    }

    fn node_mut(&mut self, slot: usize) -> &mut Node {
        self.slots[slot].node.as_mut().expect("live node")
    }

    fn endpoint(&self, slot: usize) -> Endpoint {
        Endpoint::Client {
            slot,
            incarnation: self.slots[slot].incarnation,
        }
    }

    fn extra_delay(&self, e: Endpoint) -> u64 {
        match e {
            Endpoint::Coordinator => 0,
            Endpoint::Client { slot, .. } => self.slots[slot].delay_ms,
        }
    }

    fn start_client(&mut self, slot: usize) -> Result<(), SimError> {
        let conn = self.next_conn;
        self.next_conn += 1;
        let s = &mut self.slots[slot];
        let incarnation = s.incarnation;
        s.conn = conn;
        s.outcome = "running".into();
        self.conns.insert(conn, (slot, incarnation));
        let setup = NodeSetup {
            task_id: self.spec.task_id.clone(),
            data: Arc::clone(&s.data),
            listen_address: Some(format!("sim://client-{slot}/{incarnation}")),
            randomness: Randomness::Seeded(derive_key(derive_key(self.seed, slot as u64), incarnation as u64)),
            heartbeat_interval_ms: Liveness::default().heartbeat_interval_ms,
        };
        let (node, actions) = Node::new(setup, self.now);
        s.node = Some(node);
        self.apply(slot, actions)
    }

    fn send(&mut self, from: Endpoint, to: Endpoint, envelope: Envelope) -> Result<(), SimError> {
        let bytes = encode_msg(&envelope).map_err(|e| SimError::Invariant {
            at_ms: self.now,
            detail: format!("cannot encode {}: {e}", envelope.body.kind()),
        })?;
        self.tap.on_frame(&Frame {
            at_ms: self.now,
            from,
            to,
            bytes: &bytes,
            envelope: &envelope,
        });
        let kind = envelope.body.kind().to_string();
        *self.message_counts.entry(kind.clone()).or_default() += 1;
        if from == Endpoint::Coordinator || to == Endpoint::Coordinator {
            *self.coordinator_counts.entry(kind).or_default() += 1;
        }
        let delay = self.net.latency_ms + self.extra_delay(from) + self.extra_delay(to);
        let link = self.links.entry((from, to)).or_default();
        let at = (self.now + delay).max(link.last_at);
        link.last_at = at;
        let seq = link.next_send;
        link.next_send += 1;
        self.schedule(at, Event::Deliver { from, to, seq, bytes });
        Ok(())
    }

    fn deliver(&mut self, from: Endpoint, to: Endpoint, seq: u64, bytes: &[u8]) -> Result<(), SimError> {
        let link = self.links.entry((from, to)).or_default();
        if seq != link.next_delivery {
            return Err(SimError::Invariant {
                at_ms: self.now,
                detail: format!("link {from:?} -> {to:?} delivered frame {seq}, expected {}", link.next_delivery),
            });
        }
        link.next_delivery += 1;
        let envelope = decode_msg(bytes).map_err(|e| SimError::Invariant {
            at_ms: self.now,
            detail: format!("undecodable frame on {from:?} -> {to:?}: {e}"),
        })?;
        match to {
            Endpoint::Coordinator => {
                let Endpoint::Client { slot, incarnation } = from else {
                    unreachable!("the coordinator does not message itself")
                };
                let conn = self
                    .conns
                    .iter()
                    .find(|(_, &v)| v == (slot, incarnation))
                    .map(|(&c, _)| c)
                    .expect("every incarnation has a connection");
                let out = self.coordinator.handle(conn, envelope, self.now);
                self.after_coordinator(out)
            }
            Endpoint::Client { slot, incarnation } => {
                if !self.is_live(slot, incarnation) {
                    self.dropped_frames += 1;
                    return Ok(());
                }
                let now = self.now;
                let actions = match from {
                    Endpoint::Coordinator => self.node_mut(slot).on_server(envelope.body, now),
                    Endpoint::Client { .. } => {
                        let sender = self.sender_id(from);
                        match sender {
                            Some(id) => self.node_mut(slot).on_peer(id, envelope.body, now),
                            None => Vec::new(),
                        }
                    }
                };
                self.apply(slot, actions)
            }
        }
    }

    /// Client id the sending incarnation held (peer frames are only sent
    /// after assignment).
    fn sender_id(&self, from: Endpoint) -> Option<ClientId> {
        self.clients
            .iter()
            .find(|(_, &(s, i))| Endpoint::Client { slot: s, incarnation: i } == from)
            .map(|(&id, _)| id)
    }

    fn after_coordinator(&mut self, out: Vec<Outbound>) -> Result<(), SimError> {
        self.coordinator
            .check_invariants()
            .map_err(|detail| SimError::Invariant { at_ms: self.now, detail })?;
        for o in out {
            let (slot, incarnation) = self.conns[&o.to];
            self.send(Endpoint::Coordinator, Endpoint::Client { slot, incarnation }, o.envelope)?;
        }
        self.absorb_coordinator_events()?;
        self.schedule_coordinator_wake();
        Ok(())
    }

    fn schedule_coordinator_wake(&mut self) {
        if let Some(t) = self.coordinator.next_wakeup() {
            let t = t.max(self.now);
            if self.coordinator_wakes.insert(t) {
                self.schedule(t, Event::CoordinatorWake);
            }
        }
    }

    fn schedule_node_wake(&mut self, slot: usize) {
        let Some(t) = self.slots[slot].node.as_ref().and_then(Node::next_wakeup) else {
            return;
        };
        let t = t.max(self.now);
        if self.slots[slot].wakes.insert(t) {
            let incarnation = self.slots[slot].incarnation;
            self.schedule(t, Event::NodeWake { slot, incarnation });
        }
    }

    fn apply(&mut self, slot: usize, actions: Vec<Action>) -> Result<(), SimError> {
        let me = self.endpoint(slot);
        let incarnation = self.slots[slot].incarnation;
        if let Some(id) = self.slots[slot].node.as_ref().and_then(Node::client_id) {
            if self.clients.insert(id, (slot, incarnation)).is_none() {
                self.slots[slot].client_ids.push(id);
            }
        }
        for action in actions {
            match action {
                Action::SendServer(message) => {
                    if let Message::RoundReport { round, completed: true } = message {
                        let node = self.slots[slot].node.as_ref().expect("live node");
                        if let (Some(id), Some(agg)) = (node.client_id(), node.last_aggregate()) {
                            self.peer_aggregates.insert((round, id), agg.clone());
                        }
                    }
                    let env = Envelope::new(self.spec.task_id.as_str(), message);
                    self.send(me, Endpoint::Coordinator, env)?;
                }
                Action::SendPeer { to, message } => match self.clients.get(&to).copied() {
                    Some((s, i)) => {
                        let env = Envelope::new(self.spec.task_id.as_str(), message);
                        self.send(
                            me,
                            Endpoint::Client {
                                slot: s,
                                incarnation: i,
                            },
                            env,
                        )?;
                    }
                    None => self.dropped_frames += 1,
                },
                Action::ConnectPeers { dial, .. } => {
                    for p in dial {
                        let reachable = self
                            .clients
                            .get(&p.client_id)
                            .is_some_and(|&(s, i)| self.is_live(s, i));
                        if !reachable {
                            let at = self.now + 2 * self.net.latency_ms;
                            self.schedule(
                                at,
                                Event::DialFailed {
                                    slot,
                                    incarnation,
                                    peer: p.client_id,
                                },
                            );
                        }
                    }
                }
                Action::ClosePeers { .. } => {}
                Action::Train(job) => {
                    let at = self.now + (job.epochs * self.net.train_ms_per_epoch).max(1);
                    self.schedule(
                        at,
                        Event::Trained {
                            slot,
                            incarnation,
                            job: Box::new(job),
                        },
                    );
                }
                Action::Metrics(m) => {
                    let client_id = self.slots[slot].node.as_ref().and_then(Node::client_id).unwrap_or(0);
                    self.slots[slot].epochs.push(ClientEpoch {
                        client_id,
                        round: m.round,
                        epoch: m.epoch,
                        loss: m.loss,
                        accuracy: m.accuracy,
                    });
                }
                Action::Done(finish) => {
                    let outcome = match &finish {
                        Finish::Completed { .. } => "completed".to_string(),
                        Finish::Failed(reason) => format!("failed: {reason}"),
                    };
                    self.note(format!("client slot {slot} finished: {outcome}"));
                    self.slots[slot].outcome = outcome;
                }
            }
        }
        self.schedule_node_wake(slot);
        Ok(())
    }

    fn absorb_coordinator_events(&mut self) -> Result<(), SimError> {
        for e in self.coordinator.take_events() {
            match e.event {
                SessionEvent::TaskCreated { spec } => {
                    self.note(format!("task {} created", spec.task_id));
                }
                SessionEvent::ClientJoined { client_id, connected } => {
                    self.note(format!("client {client_id} joined ({connected} connected)"));
                }
                SessionEvent::ClientDeparted {
                    client_id,
                    reason,
                    connected,
                } => {
                    self.note(format!("client {client_id} departed: {reason} ({connected} connected)"));
                }
                SessionEvent::RoundStarted { round, expected } => {
                    self.note(format!("round {round} started with {expected:?}"));
                    self.fire_round_faults(round)?;
                }
                SessionEvent::PeersDispatched { round, peers } => {
                    self.note(format!("round {round} peer list sent to {peers:?}"));
                }
                SessionEvent::ReadyDeferred { round, client_id } => {
                    self.note(format!("round {round}: client {client_id} deferred to the next round"));
                }
                SessionEvent::UpdateRejected { round, client_id, code } => {
                    self.note(format!("round {round}: update from client {client_id} rejected ({code})"));
                }
                SessionEvent::Aggregated {
                    round,
                    participants,
                    global,
                } => {
                    self.note(format!("round {round} aggregated {participants:?}"));
                    let global = global.ok_or_else(|| SimError::Invariant {
                        at_ms: self.now,
                        detail: format!("aggregation of round {round} carries no model"),
                    })?;
                    self.record_round(round, e.at_ms, participants, Vec::new(), Some(global));
                }
                SessionEvent::RoundClosed {
                    round,
                    completed,
                    failed,
                } => {
                    self.note(format!("round {round} closed: completed {completed:?}, failed {failed:?}"));
                    let agg = completed
                        .iter()
                        .find_map(|c| self.peer_aggregates.get(&(round, *c)).cloned());
                    if let Some(a) = &agg {
                        for c in &completed {
                            if let Some(b) = self.peer_aggregates.get(&(round, *c)) {
                                let gap = a.max_abs_diff(b);
                                if gap > PEER_AGREEMENT {
                                    return Err(SimError::Invariant {
                                        at_ms: self.now,
                                        detail: format!("round {round}: client {c} aggregate differs by {gap}"),
                                    });
                                }
                            }
                        }
                    }
                    self.record_round(round, e.at_ms, completed, failed, agg);
                }
                SessionEvent::Paused { round, reason } => {
                    self.note(format!("round {round} paused: {reason}"));
                }
                SessionEvent::OperatorPaused { round } => self.note(format!("operator paused round {round}")),
                SessionEvent::OperatorResumed { round } => self.note(format!("operator resumed round {round}")),
                SessionEvent::Metric { .. } => {}
                SessionEvent::Finished { rounds } => {
                    self.session_finished = true;
                    self.note(format!("session finished after {rounds} rounds"));
                }
            }
        }
        Ok(())
    }

    fn record_round(
        &mut self,
        round: u64,
        at_ms: u64,
        participants: Vec<ClientId>,
        failed: Vec<ClientId>,
        global: Option<ParamVector>,
    ) {
        let scored = global
            .as_ref()
            .filter(|_| !self.holdout.is_empty())
            .and_then(|g| evaluate(g, &self.holdout).ok());
        self.rounds.push(RoundRecord {
            round,
            at_ms,
            participants,
            failed,
            loss: scored.map(|s| s.0),
            accuracy: scored.map(|s| s.1),
        });
        self.peer_aggregates.retain(|(r, _), _| *r > round);
        if global.is_some() {
            self.final_params = global;
        }
    }

    fn fire_round_faults(&mut self, round: u64) -> Result<(), SimError> {
        for i in 0..self.faults.len() {
            if self.faults[i].0 == Trigger::Round(round) && !self.fired[i] {
                self.fire_fault(i)?;
            }
        }
        Ok(())
    }

    fn fire_fault(&mut self, i: usize) -> Result<(), SimError> {
        if std::mem::replace(&mut self.fired[i], true) {
            return Ok(());
        }
        let (_, slot, event) = self.faults[i];
        match event {
            FaultEvent::DropOut => {
                let Some(node) = self.slots[slot].node.take() else {
                    self.note(format!("fault {i}: client slot {slot} is already gone"));
                    return Ok(());
                };
                let r = node.report();
                let s = &mut self.slots[slot];
                s.rounds_completed += r.rounds_completed;
                s.rounds_failed += r.rounds_failed;
                s.outcome = "dropped".into();
                s.wakes.clear();
                // Keep the node slot empty but remember the incarnation so
                // the next one is distinct.
                s.incarnation += 1;
                let id = r.client_id.map_or("unassigned".to_string(), |c| c.to_string());
                self.note(format!("fault {i}: client slot {slot} (id {id}) dropped out"));
            }
            FaultEvent::Rejoin => {
                if self.slots[slot].node.is_some() {
                    self.note(format!("fault {i}: client slot {slot} is connected; rejoin ignored"));
                    return Ok(());
                }
                self.note(format!("fault {i}: client slot {slot} rejoins"));
                self.start_client(slot)?;
            }
            FaultEvent::Delay { ms } => {
                self.slots[slot].delay_ms = ms;
                self.note(format!("fault {i}: client slot {slot} delayed by {ms} ms"));
            }
        }
        Ok(())
    }
}
