//! Tokio driver: runs a [`Node`] over framed TCP.
//!
//! One server connection, one listener for peers, one connection per peer
//! pair (the smaller client id dials). Training runs on the blocking pool so
//! heartbeats keep flowing while a round trains. Peer links persist across
//! rounds; a lost link is redialed when the next peer list needs it.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use colearn_core::model::{ModelError, TrainOutcome};
use colearn_core::wire::{Envelope, Message, PeerInfo, WireError};
use colearn_core::wire_async::{read_frame, write_frame};
use colearn_core::ClientId;
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio::time::Instant;
use tracing::{debug, info, warn};

use crate::machine::{Action, Finish, Node, NodeReport, NodeSetup};
use crate::solo::write_metrics_csv;

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
const FLUSH_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("server {addr} unreachable after {attempts} attempts: {source}")]
    Unreachable {
        addr: String,
        attempts: u32,
        source: std::io::Error,
    },
    #[error("cannot listen for peers on {addr}: {source}")]
    Listen { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("cannot write metrics: {0}")]
    Metrics(#[from] csv::Error),
}

#[derive(Debug, Clone)]
pub struct DriverConfig {
    pub server_address: String,
    /// Where to accept peer connections (decentralized tasks). Port 0 picks
    /// a free port.
    pub peer_bind: Option<SocketAddr>,
    /// Address announced to peers; defaults to the bound address.
    pub advertise: Option<String>,
    /// Attempts to reach the server, with doubling backoff between them.
    pub connect_attempts: u32,
    pub retry_backoff: Duration,
    /// Attempts to dial each peer before the round is given up.
    pub peer_attempts: u32,
    pub metrics_csv: Option<PathBuf>,
}

impl DriverConfig {
    pub fn new(server_address: impl Into<String>) -> Self {
        Self {
            server_address: server_address.into(),
            peer_bind: None,
            advertise: None,
            connect_attempts: 5,
            retry_backoff: Duration::from_millis(200),
            peer_attempts: 3,
            metrics_csv: None,
        }
    }
}

enum Event {
    Server(Envelope),
    ServerDown(Option<WireError>),
    PeerUp {
        peer: ClientId,
        link: u64,
        tx: mpsc::UnboundedSender<Envelope>,
    },
    PeerFrame {
        peer: ClientId,
        envelope: Envelope,
    },
    PeerDown {
        peer: ClientId,
        link: u64,
    },
    DialFailed {
        peer: ClientId,
    },
    Trained {
        round: u64,
        outcome: Result<TrainOutcome, ModelError>,
    },
}

struct ServerLink {
    tx: mpsc::UnboundedSender<Envelope>,
    reader: JoinHandle<()>,
    writer: JoinHandle<()>,
}

async fn connect_with_retry(cfg: &DriverConfig) -> Result<TcpStream, NodeError> {
    let attempts = cfg.connect_attempts.max(1);
    let mut backoff = cfg.retry_backoff;
    let mut last = None;
    for attempt in 1..=attempts {
        match TcpStream::connect(&cfg.server_address).await {
            Ok(s) => return Ok(s),
            Err(e) => {
                warn!(addr = %cfg.server_address, attempt, error = %e, "server connection failed");
                last = Some(e);
            }
        }
        if attempt < attempts {
            tokio::time::sleep(backoff).await;
            backoff *= 2;
        }
    }
    Err(NodeError::Unreachable {
        addr: cfg.server_address.clone(),
        attempts,
        source: last.expect("at least one attempt"),
    })
}

fn spawn_server_link(stream: TcpStream, events: mpsc::UnboundedSender<Event>) -> ServerLink {
    let _ = stream.set_nodelay(true);
    let (mut r, mut w) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Envelope>();
    let writer = tokio::spawn(async move {
        while let Some(env) = rx.recv().await {
            if write_frame(&mut w, &env).await.is_err() {
                break;
            }
        }
    });
    let reader = tokio::spawn(async move {
        loop {
            match read_frame(&mut r).await {
                Ok(Some(env)) => {
                    if events.send(Event::Server(env)).is_err() {
                        return;
                    }
                }
                Ok(None) => {
                    let _ = events.send(Event::ServerDown(None));
                    return;
                }
                Err(e) => {
                    let _ = events.send(Event::ServerDown(Some(e)));
                    return;
                }
            }
        }
    });
    ServerLink { tx, reader, writer }
}

/// Runs both halves of an established peer connection.
fn spawn_peer_link(stream: TcpStream, peer: ClientId, link: u64, events: mpsc::UnboundedSender<Event>) {
    let _ = stream.set_nodelay(true);
    let (mut r, mut w) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Envelope>();
    if events.send(Event::PeerUp { peer, link, tx }).is_err() {
        return;
    }
    tokio::spawn(async move {
        while let Some(env) = rx.recv().await {
            if write_frame(&mut w, &env).await.is_err() {
                break;
            }
        }
    });
    tokio::spawn(async move {
        while let Ok(Some(envelope)) = read_frame(&mut r).await {
            if events.send(Event::PeerFrame { peer, envelope }).is_err() {
                return;
            }
        }
        let _ = events.send(Event::PeerDown { peer, link });
    });
}

async fn accept_peers(listener: TcpListener, task_id: String, links: Arc<AtomicU64>, events: mpsc::UnboundedSender<Event>) {
    loop {
        let Ok((mut stream, addr)) = listener.accept().await else {
            continue;
        };
        let events = events.clone();
        let links = Arc::clone(&links);
        let task_id = task_id.clone();
        tokio::spawn(async move {
            match tokio::time::timeout(HANDSHAKE_TIMEOUT, read_frame(&mut stream)).await {
                Ok(Ok(Some(Envelope {
                    task_id: t,
                    body: Message::PeerHello { client_id },
                    ..
                }))) if t == task_id => {
                    debug!(peer = client_id, %addr, "peer connected");
                    spawn_peer_link(stream, client_id, links.fetch_add(1, Ordering::Relaxed), events);
                }
                _ => debug!(%addr, "dropping peer connection without a valid hello"),
            }
        });
    }
}

#[allow(clippy::too_many_arguments)]
fn dial_peer(
    me: ClientId,
    peer: PeerInfo,
    task_id: String,
    attempts: u32,
    backoff: Duration,
    links: Arc<AtomicU64>,
    events: mpsc::UnboundedSender<Event>,
) {
    tokio::spawn(async move {
        let mut delay = backoff;
        for attempt in 1..=attempts.max(1) {
            match TcpStream::connect(&peer.address).await {
                Ok(mut stream) => {
                    let hello = Envelope::new(task_id.as_str(), Message::PeerHello { client_id: me });
                    if write_frame(&mut stream, &hello).await.is_ok() {
                        spawn_peer_link(stream, peer.client_id, links.fetch_add(1, Ordering::Relaxed), events);
                        return;
                    }
                }
                Err(e) => warn!(peer = peer.client_id, addr = %peer.address, attempt, error = %e, "peer dial failed"),
            }
            tokio::time::sleep(delay).await;
            delay *= 2;
        }
        let _ = events.send(Event::DialFailed { peer: peer.client_id });
    });
}

/// Joins the task, trains until the session finishes and returns the node's
/// report. Server loss triggers a bounded reconnect and a fresh join.
pub async fn run_node(cfg: DriverConfig, mut setup: NodeSetup) -> Result<NodeReport, NodeError> {
    let started = Instant::now();
    let now = move || started.elapsed().as_millis() as u64;
    let (events_tx, mut events) = mpsc::unbounded_channel::<Event>();
    let link_ids = Arc::new(AtomicU64::new(1));

    let mut acceptor = None;
    if let Some(bind) = cfg.peer_bind {
        let listener = TcpListener::bind(bind)
            .await
            .map_err(|source| NodeError::Listen { addr: bind, source })?;
        let bound = listener.local_addr().map_err(|source| NodeError::Listen { addr: bind, source })?;
        setup.listen_address = Some(cfg.advertise.clone().unwrap_or_else(|| bound.to_string()));
        info!(%bound, "accepting peer connections");
        acceptor = Some(tokio::spawn(accept_peers(
            listener,
            setup.task_id.clone(),
            Arc::clone(&link_ids),
            events_tx.clone(),
        )));
    }

    let task_id = setup.task_id.clone();
    let mut server = spawn_server_link(connect_with_retry(&cfg).await?, events_tx.clone());
    let (mut node, first) = Node::new(setup, now());
    let mut peers: HashMap<ClientId, (u64, mpsc::UnboundedSender<Envelope>)> = HashMap::new();
    let mut queued: HashMap<ClientId, Vec<Envelope>> = HashMap::new();
    let mut pending = first;
    let mut fatal: Option<NodeError> = None;

    loop {
        for action in std::mem::take(&mut pending) {
            match action {
                Action::SendServer(m) => {
                    let _ = server.tx.send(Envelope::new(task_id.as_str(), m));
                }
                Action::SendPeer { to, message } => {
                    let env = Envelope::new(task_id.as_str(), message);
                    match peers.get(&to) {
                        Some((_, tx)) => {
                            let _ = tx.send(env);
                        }
                        None => queued.entry(to).or_default().push(env),
                    }
                }
                Action::ConnectPeers { round, dial, accept } => {
                    debug!(round, dial = dial.len(), accept = accept.len(), "opening peer mesh");
                    let me = node.client_id().expect("joined before exchanging");
                    for p in dial {
                        if !peers.contains_key(&p.client_id) {
                            dial_peer(
                                me,
                                p,
                                task_id.clone(),
                                cfg.peer_attempts,
                                cfg.retry_backoff,
                                Arc::clone(&link_ids),
                                events_tx.clone(),
                            );
                        }
                    }
                }
                Action::ClosePeers { round } => {
                    // Drop undeliverable messages of the finished round; links stay up.
                    for q in queued.values_mut() {
                        q.retain(|e| e.body.round().is_some_and(|r| r > round));
                    }
                    queued.retain(|_, q| !q.is_empty());
                }
                Action::Train(job) => {
                    let tx = events_tx.clone();
                    tokio::task::spawn_blocking(move || {
                        let outcome = job.run();
                        let _ = tx.send(Event::Trained {
                            round: job.round,
                            outcome,
                        });
                    });
                }
                Action::Metrics(m) => {
                    info!(round = m.round, epoch = m.epoch, loss = m.loss, accuracy = m.accuracy, "epoch finished");
                }
                Action::Done(finish) => match &finish {
                    Finish::Completed { rounds } => info!(rounds, "session finished"),
                    Finish::Failed(reason) => warn!(%reason, "node stopped"),
                },
            }
        }
        if node.is_done() {
            break;
        }
        let wake = node
            .next_wakeup()
            .map(|ms| started + Duration::from_millis(ms))
            .unwrap_or_else(|| Instant::now() + Duration::from_secs(1));
        let event = tokio::select! {
            ev = events.recv() => ev,
            _ = tokio::time::sleep_until(wake) => {
                pending = node.tick(now());
                continue;
            }
        };
        let Some(event) = event else { break };
        pending = match event {
            Event::Server(env) => node.on_server(env.body, now()),
            Event::ServerDown(err) => {
                if let Some(e @ WireError::VersionMismatch { .. }) = err {
                    fatal = Some(e.into());
                    break;
                }
                warn!("lost the server connection; reconnecting");
                match connect_with_retry(&cfg).await {
                    Ok(stream) => {
                        server.reader.abort();
                        server = spawn_server_link(stream, events_tx.clone());
                        node.rejoin(now())
                    }
                    Err(e) => {
                        fatal = Some(e);
                        break;
                    }
                }
            }
            Event::PeerUp { peer, link, tx } => {
                for env in queued.remove(&peer).unwrap_or_default() {
                    let _ = tx.send(env);
                }
                peers.insert(peer, (link, tx));
                Vec::new()
            }
            Event::PeerFrame { peer, envelope } => {
                if envelope.task_id == task_id {
                    node.on_peer(peer, envelope.body, now())
                } else {
                    Vec::new()
                }
            }
            Event::PeerDown { peer, link } => {
                if peers.get(&peer).is_some_and(|(l, _)| *l == link) {
                    peers.remove(&peer);
                    node.peer_failed(peer, now())
                } else {
                    Vec::new()
                }
            }
            Event::DialFailed { peer } => {
                queued.remove(&peer);
                node.peer_failed(peer, now())
            }
            Event::Trained { round, outcome } => node.on_trained(round, outcome, now()),
        };
    }

    // Let queued frames (final report, leave) reach the server.
    drop(peers);
    let ServerLink { tx, reader, writer } = server;
    drop(tx);
    let _ = tokio::time::timeout(FLUSH_TIMEOUT, writer).await;
    reader.abort();
    if let Some(a) = acceptor {
        a.abort();
    }
    if let Some(e) = fatal {
        return Err(e);
    }
    let report = node.report();
    if let Some(path) = &cfg.metrics_csv {
        write_metrics_csv(path, &report.metrics)?;
    }
    Ok(report)
}
