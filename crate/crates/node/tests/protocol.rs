//! Node state machines wired to a real coordinator through an in-process
//! queue: no sockets, no clock, training runs inline.

use std::collections::{BTreeMap, VecDeque};

use colearn_coordinator::{Coordinator, Liveness};
use colearn_core::aggregation::{fedavg, Contribution, Weighting};
use colearn_core::data::Dataset;
use colearn_core::model::{init_params, train_epochs, ModelSpec, TrainConfig};
use colearn_core::privacy::PrivacyConfig;
use colearn_core::rng::{derive_key, normal_at};
use colearn_core::task::{Scheme, TaskSpec};
use colearn_core::wire::{Envelope, Message, PeerInfo};
use colearn_core::{ClientId, ParamVector};
use colearn_node::{dial_plan, Action, Exchange, Finish, Node, NodeSetup, Progress, Randomness};

const TASK: &str = "blobs";

/// Two Gaussian blobs per class in `dim` dimensions, `n` rows.
fn blobs(n: usize, dim: usize, classes: usize, seed: u64) -> Dataset {
    let mut x = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for d in 0..dim {
            let centre = if d % classes == c { 2.0 } else { 0.0 };
            x.push(centre + 0.5 * normal_at(seed, (i * dim + d) as u64));
        }
        y.push(c);
    }
    Dataset::new(x, dim, y, classes, "blobs")
}

fn spec(scheme: Scheme, min: usize, rounds: u64) -> TaskSpec {
    TaskSpec {
        task_id: TASK.into(),
        title: String::new(),
        description: String::new(),
        model: ModelSpec::new(4, 0, 2, 11),
        train: TrainConfig {
            batch_size: 8,
            epochs_per_round: 2,
            learning_rate: 0.2,
            shuffle_seed: 5,
        },
        privacy: PrivacyConfig::disabled(),
        scheme,
        secure_aggregation: false,
        weighting: Weighting::Samples,
        min_participants: min,
        ready_threshold: min,
        total_rounds: rounds,
        round_deadline_secs: 60,
    }
}

enum Delivery {
    ToServer(usize, Message),
    ToNode(usize, Message),
    ToPeer { from: ClientId, to: ClientId, msg: Message },
}

/// Coordinator plus nodes, delivering every message in FIFO order.
struct Bus {
    coordinator: Coordinator,
    nodes: Vec<Node>,
    queue: VecDeque<Delivery>,
    /// Every frame a node sent, for inspection.
    sent: Vec<(usize, Message)>,
    now: u64,
}

impl Bus {
    fn new(spec: &TaskSpec, data: Vec<Dataset>, listen: bool) -> Bus {
        let mut coordinator = Coordinator::new(Liveness::default());
        coordinator.create_task(spec.clone(), 0).unwrap();
        let mut bus = Bus {
            coordinator,
            nodes: Vec::new(),
            queue: VecDeque::new(),
            sent: Vec::new(),
            now: 0,
        };
        for (i, d) in data.into_iter().enumerate() {
            let mut setup = NodeSetup::new(TASK, d);
            setup.randomness = Randomness::Seeded(100 + i as u64);
            if listen {
                setup.listen_address = Some(format!("node-{i}"));
            }
            let (node, actions) = Node::new(setup, 0);
            bus.nodes.push(node);
            bus.apply(i, actions);
        }
        bus
    }

    fn index_of(&self, client: ClientId) -> usize {
        self.nodes.iter().position(|n| n.client_id() == Some(client)).unwrap()
    }

    fn apply(&mut self, i: usize, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::SendServer(m) => {
                    self.sent.push((i, m.clone()));
                    self.queue.push_back(Delivery::ToServer(i, m));
                }
                Action::SendPeer { to, message } => {
                    self.sent.push((i, message.clone()));
                    let from = self.nodes[i].client_id().unwrap();
                    self.queue.push_back(Delivery::ToPeer { from, to, msg: message });
                }
                Action::Train(job) => {
                    let outcome = job.run();
                    let more = self.nodes[i].on_trained(job.round, outcome, self.now);
                    self.apply(i, more);
                }
                Action::ConnectPeers { .. } | Action::ClosePeers { .. } | Action::Metrics(_) | Action::Done(_) => {}
            }
        }
    }

    fn run(&mut self) {
        let mut steps = 0;
        while let Some(d) = self.queue.pop_front() {
            steps += 1;
            assert!(steps < 100_000, "message storm");
            match d {
                Delivery::ToServer(i, m) => {
                    let out = self.coordinator.handle(i as u64 + 1, Envelope::new(TASK, m), self.now);
                    for o in out {
                        self.queue.push_back(Delivery::ToNode(o.to as usize - 1, o.envelope.body));
                    }
                    self.coordinator.check_invariants().unwrap();
                }
                Delivery::ToNode(i, m) => {
                    let actions = self.nodes[i].on_server(m, self.now);
                    self.apply(i, actions);
                }
                Delivery::ToPeer { from, to, msg } => {
                    let j = self.index_of(to);
                    let actions = self.nodes[j].on_peer(from, msg, self.now);
                    self.apply(j, actions);
                }
            }
        }
    }
}

#[test]
fn single_client_federated_run_matches_solo_training() {
    let s = spec(Scheme::Federated, 1, 2);
    let data = blobs(40, 4, 2, 1);
    let mut bus = Bus::new(&s, vec![data.clone()], false);
    bus.run();
    let node = &bus.nodes[0];
    assert!(node.is_done());
    assert_eq!(node.report().finish, Some(Finish::Completed { rounds: 2 }));
    let solo = train_epochs(&init_params(&s.model).unwrap(), &data, &s.train, 0, 4).unwrap();
    // The server applies global + (local - global), which is the local model
    // up to one rounding per coordinate and round.
    let got = node.last_aggregate().unwrap();
    let diff = got.max_abs_diff(&solo.params);
    assert!(diff <= 1e-12, "federated k=1 differs from solo by {diff}");
    let epochs: Vec<u64> = node.metrics().iter().map(|m| m.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3, 4]);
    assert_eq!(bus.coordinator.snapshot(TASK).unwrap().series[0].points.len(), 4);
}

#[test]
fn federated_upload_is_the_exact_delta_when_privacy_is_disabled() {
    let s = spec(Scheme::Federated, 2, 1);
    let data = vec![blobs(30, 4, 2, 2), blobs(50, 4, 2, 3)];
    let mut bus = Bus::new(&s, data.clone(), false);
    bus.run();
    let start = init_params(&s.model).unwrap();
    let mut uploads = BTreeMap::new();
    for (i, m) in &bus.sent {
        if let Message::UpdateUpload { payload, sample_count, .. } = m {
            uploads.insert(*i, (payload.clone(), *sample_count));
        }
    }
    assert_eq!(uploads.len(), 2);
    let mut contribs = Vec::new();
    for (i, d) in data.iter().enumerate() {
        let local = train_epochs(&start, d, &s.train, 0, 2).unwrap().params;
        let delta = local.sub(&start).unwrap();
        let (payload, count) = &uploads[&i];
        assert_eq!(payload.values(), delta.values(), "node {i} upload is not bitwise local - start");
        assert_eq!(*count, Some(d.len() as u64));
        contribs.push(Contribution {
            client_id: bus.nodes[i].client_id().unwrap(),
            round: 0,
            payload: delta,
            sample_count: Some(d.len() as u64),
        });
    }
    let expected = start.add(&fedavg(&contribs, Weighting::Samples).unwrap().global_update).unwrap();
    for n in &bus.nodes {
        assert_eq!(n.last_aggregate().unwrap(), &expected);
    }
}

#[test]
fn noise_changes_uploads_but_not_their_shape() {
    let mut s = spec(Scheme::Federated, 1, 1);
    s.privacy = PrivacyConfig {
        clip_radius: 0.5,
        noise_scale: 0.1,
        noise_seed: 9,
    };
    let mut bus = Bus::new(&s, vec![blobs(30, 4, 2, 2)], false);
    bus.run();
    let payload = bus
        .sent
        .iter()
        .find_map(|(_, m)| match m {
            Message::UpdateUpload { payload, .. } => Some(payload.clone()),
            _ => None,
        })
        .unwrap();
    let start = init_params(&s.model).unwrap();
    let local = train_epochs(&start, &blobs(30, 4, 2, 2), &s.train, 0, 2).unwrap().params;
    let delta = local.sub(&start).unwrap();
    assert!(payload.same_shape(&delta));
    assert!(payload.max_abs_diff(&delta) > 0.0);
}

#[test]
fn decentralized_peers_agree_and_match_plain_weighted_mean() {
    for secure in [false, true] {
        let mut s = spec(Scheme::Decentralized, 3, 3);
        s.secure_aggregation = secure;
        let data = vec![blobs(30, 4, 2, 4), blobs(40, 4, 2, 5), blobs(50, 4, 2, 6)];
        let mut bus = Bus::new(&s, data, true);
        bus.run();
        let first = bus.nodes[0].last_aggregate().unwrap().clone();
        for n in &bus.nodes {
            let r = n.report();
            assert_eq!(r.finish, Some(Finish::Completed { rounds: 3 }), "secure={secure}");
            assert_eq!(r.rounds_completed, 3);
            let diff = n.last_aggregate().unwrap().max_abs_diff(&first);
            // Secure sums decode identically on every peer; plain averages
            // are computed from the same sorted inputs.
            assert_eq!(diff, 0.0, "peers disagree (secure={secure})");
        }
        let snap = bus.coordinator.snapshot(TASK).unwrap();
        assert_eq!(snap.aggregations.len(), 3);
        let shares = bus.sent.iter().filter(|(_, m)| matches!(m, Message::PeerShare { .. })).count();
        let updates = bus.sent.iter().filter(|(_, m)| matches!(m, Message::PeerUpdate { .. })).count();
        if secure {
            // k-1 input shares plus k-1 partials per peer per round.
            assert_eq!((shares, updates), (3 * 3 * 2 * 2, 0));
        } else {
            assert_eq!((shares, updates), (0, 3 * 3 * 2));
        }
    }
}

#[test]
fn dial_rule_yields_one_connection_per_pair() {
    let peers = |ids: &[u64]| -> Vec<PeerInfo> {
        ids.iter()
            .map(|&id| PeerInfo {
                client_id: id,
                address: format!("h{id}"),
            })
            .collect()
    };
    let (dial, accept) = dial_plan(4, &peers(&[9]));
    assert_eq!(dial.iter().map(|p| p.client_id).collect::<Vec<_>>(), vec![9]);
    assert!(accept.is_empty());
    let (dial, accept) = dial_plan(9, &peers(&[4]));
    assert!(dial.is_empty());
    assert_eq!(accept, vec![4]);

    let ids = [2u64, 5, 7, 11];
    let mut connections = 0;
    for &me in &ids {
        let others: Vec<u64> = ids.iter().copied().filter(|&i| i != me).collect();
        let (dial, accept) = dial_plan(me, &peers(&others));
        assert_eq!(dial.len() + accept.len(), ids.len() - 1);
        connections += dial.len();
    }
    assert_eq!(connections, ids.len() * (ids.len() - 1) / 2);
}

fn vector(values: Vec<f64>) -> ParamVector {
    // A bias-plus-weights softmax layer with two outputs holds 2 * (in + 1) values.
    assert!(values.len() % 2 == 0 && values.len() >= 4);
    let spec = ModelSpec::new(values.len() / 2 - 1, 0, 2, 0);
    init_params(&spec).unwrap().with_values(values).unwrap()
}

/// Runs a full exchange among `contribs` with direct delivery.
fn exchange_all(contribs: &[(ClientId, ParamVector, u64)], secure: bool, weighting: Weighting) -> Vec<ParamVector> {
    use colearn_core::privacy::{FixedPointCodec, DEFAULT_SCALE_BITS};
    let ids: std::collections::BTreeSet<ClientId> = contribs.iter().map(|c| c.0).collect();
    let mut exchanges = BTreeMap::new();
    let mut queue = VecDeque::new();
    let mut results = BTreeMap::new();
    for (id, p, n) in contribs {
        let sec = secure.then(|| (FixedPointCodec::new(DEFAULT_SCALE_BITS).unwrap(), derive_key(77, *id)));
        let (ex, progress) = Exchange::start(0, *id, ids.clone(), 1000, weighting, p.clone(), *n, sec);
        exchanges.insert(*id, ex);
        match progress {
            Progress::Pending(out) => queue.extend(out.into_iter().map(|(to, m)| (*id, to, m))),
            Progress::Complete { aggregate, send } => {
                queue.extend(send.into_iter().map(|(to, m)| (*id, to, m)));
                results.insert(*id, aggregate);
            }
            Progress::Failed(e) => panic!("{e}"),
        }
    }
    while let Some((from, to, m)) = queue.pop_front() {
        match exchanges.get_mut(&to).unwrap().receive(from, m) {
            Progress::Pending(out) => queue.extend(out.into_iter().map(|(t, m)| (to, t, m))),
            Progress::Complete { aggregate, send } => {
                queue.extend(send.into_iter().map(|(t, m)| (to, t, m)));
                results.insert(to, aggregate);
            }
            Progress::Failed(e) => panic!("{e}"),
        }
    }
    results.into_values().collect()
}

#[test]
fn two_peers_with_identical_updates_aggregate_to_that_update() {
    let u = vector(vec![0.25, -1.5, 3.0, 0.0]);
    for secure in [false, true] {
        let out = exchange_all(&[(4, u.clone(), 10), (9, u.clone(), 30)], secure, Weighting::Samples);
        assert_eq!(out.len(), 2);
        for agg in out {
            let tol = if secure { 2.0 * 2f64.powi(-20) } else { 0.0 };
            assert!(agg.max_abs_diff(&u) <= tol, "secure={secure}");
        }
    }
}

#[test]
fn secure_and_plain_exchanges_agree_within_fixed_point_resolution() {
    let contribs: Vec<(ClientId, ParamVector, u64)> = (1..=3)
        .map(|id| {
            let v: Vec<f64> = (0..6).map(|i| normal_at(id, i)).collect();
            (id, vector(v), 10 * id)
        })
        .collect();
    let plain = exchange_all(&contribs, false, Weighting::Samples);
    let secure = exchange_all(&contribs, true, Weighting::Samples);
    for (p, s) in plain.iter().zip(&secure) {
        assert!(p.max_abs_diff(s) <= 3.0 * 2f64.powi(-20));
    }
}

#[test]
fn exchange_deadline_reports_failure_and_keeps_local_model() {
    let s = spec(Scheme::Decentralized, 2, 2);
    let mut bus = Bus::new(&s, vec![blobs(30, 4, 2, 7), blobs(30, 4, 2, 8)], true);
    // Deliver everything except peer traffic to node 1.
    let mut steps = 0;
    while let Some(d) = bus.queue.pop_front() {
        steps += 1;
        assert!(steps < 10_000);
        match d {
            Delivery::ToPeer { to, .. } if bus.index_of(to) == 0 => {}
            Delivery::ToServer(i, m) => {
                for o in bus.coordinator.handle(i as u64 + 1, Envelope::new(TASK, m), bus.now) {
                    bus.queue.push_back(Delivery::ToNode(o.to as usize - 1, o.envelope.body));
                }
            }
            Delivery::ToNode(i, m) => {
                let a = bus.nodes[i].on_server(m, bus.now);
                bus.apply(i, a);
            }
            Delivery::ToPeer { from, to, msg } => {
                let j = bus.index_of(to);
                let a = bus.nodes[j].on_peer(from, msg, bus.now);
                bus.apply(j, a);
            }
        }
    }
    let before = bus.nodes[0].params().unwrap().clone();
    assert_eq!(bus.nodes[0].next_wakeup(), Some(10_000), "heartbeat precedes the 60 s deadline");
    let actions = bus.nodes[0].tick(60_000);
    let report = actions.iter().find_map(|a| match a {
        Action::SendServer(Message::RoundReport { round, completed }) => Some((*round, *completed)),
        _ => None,
    });
    assert_eq!(report, Some((0, false)));
    assert_eq!(bus.nodes[0].report().rounds_failed, 1);
    assert!(actions.iter().any(|a| matches!(a, Action::Train(_))), "moves on to round 1");
    assert_ne!(bus.nodes[0].params().unwrap(), &before, "adopts the local model, not the start");
}

#[test]
fn heartbeats_follow_silence_and_departure_triggers_rejoin() {
    let s = spec(Scheme::Federated, 2, 1);
    let mut bus = Bus::new(&s, vec![blobs(20, 4, 2, 1)], false);
    bus.run();
    let node = &mut bus.nodes[0];
    assert_eq!(node.client_id(), Some(1));
    assert_eq!(node.next_wakeup(), Some(10_000));
    let beat = node.tick(10_000);
    assert!(matches!(beat.as_slice(), [Action::SendServer(Message::Heartbeat {})]));
    assert!(node.tick(15_000).is_empty());
    let out = node.on_server(Message::error("departed", "missed heartbeats"), 50_000);
    assert!(matches!(out.as_slice(), [Action::SendServer(Message::JoinTask { .. })]));
    assert_eq!(node.client_id(), None);
}

#[test]
fn mismatched_data_is_refused_after_assignment() {
    let s = spec(Scheme::Federated, 1, 1);
    let mut bus = Bus::new(&s, vec![blobs(20, 3, 2, 1)], false);
    bus.run();
    match bus.nodes[0].report().finish {
        Some(Finish::Failed(reason)) => assert!(reason.contains("features"), "{reason}"),
        other => panic!("expected failure, got {other:?}"),
    }
}
