//! Network front end for the coordinator.
//!
//! One actor task owns the [`Coordinator`] and the [`Store`]. Every input —
//! a frame from a node, a closed socket, an operator request, a timer — is a
//! [`Command`] on its queue, so the state machine sees a single ordered
//! stream. After each step the actor journals the new events, then delivers
//! the outbound frames, then publishes fresh snapshots of the tasks that
//! changed. A crash therefore never exposes state that the journal lacks.
//!
//! Nodes speak the framed wire protocol over TCP. Operators and the dashboard
//! use HTTP:
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/tasks` | task summaries |
//! | POST | `/tasks` | create from a TaskSpec JSON body |
//! | GET | `/tasks/{id}/snapshot` | full session snapshot |
//! | POST | `/tasks/{id}/pause`, `/tasks/{id}/resume` | operator control (bearer token) |
//! | GET | `/tasks/{id}/stream` | websocket of `{"type":"snapshot","snapshot":…}` messages |

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use colearn_core::task::TaskSpec;
use colearn_core::wire::Envelope;
use colearn_core::wire_async::{read_frame, write_frame};
use futures::{SinkExt, StreamExt};
use serde::Serialize;
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use tracing::{debug, error, info, warn};

use crate::config::ServerConfig;
use crate::session::{ConnId, Coordinator, CoordinatorError, Outbound};
use crate::snapshot::{SessionSnapshot, TaskSummary};
use crate::store::{Store, StoreError};

/// Frames queued for one node before it counts as too slow and is dropped.
const CONN_QUEUE: usize = 1024;
/// Snapshot messages buffered per websocket subscriber before it resyncs.
const SNAPSHOT_QUEUE: usize = 256;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("server task failed: {0}")]
    Join(String),
}

type Reply<T> = oneshot::Sender<Result<T, CoordinatorError>>;

enum Command {
    Connected {
        conn: ConnId,
        tx: mpsc::Sender<Envelope>,
    },
    Frame {
        conn: ConnId,
        envelope: Envelope,
    },
    Closed {
        conn: ConnId,
    },
    Create {
        spec: Box<TaskSpec>,
        reply: Reply<TaskSummary>,
    },
    List {
        reply: oneshot::Sender<Vec<TaskSummary>>,
    },
    Snapshot {
        task_id: String,
        reply: Reply<SessionSnapshot>,
    },
    Pause {
        task_id: String,
        reply: Reply<SessionSnapshot>,
    },
    Resume {
        task_id: String,
        reply: Reply<SessionSnapshot>,
    },
}

/// Milliseconds on a clock that is monotonic within the process and
/// continues from wall-clock time across restarts, so journal timestamps
/// stay ordered.
#[derive(Debug, Clone, Copy)]
struct Clock {
    start: Instant,
    base_ms: u64,
}

impl Clock {
    fn new() -> Self {
        let base_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Self {
            start: Instant::now(),
            base_ms,
        }
    }

    fn now(&self) -> u64 {
        self.base_ms + self.start.elapsed().as_millis() as u64
    }

    fn instant_at(&self, ms: u64) -> tokio::time::Instant {
        let offset = ms.saturating_sub(self.base_ms);
        tokio::time::Instant::from_std(self.start + Duration::from_millis(offset))
    }
}

/// A running server. Dropping it does not stop the tasks; call
/// [`RunningServer::shutdown`] or [`RunningServer::wait`].
pub struct RunningServer {
    pub wire_addr: SocketAddr,
    pub http_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    actor: JoinHandle<Result<(), ServerError>>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningServer {
    /// Stops accepting connections and waits for the actor to exit.
    pub async fn shutdown(self) -> Result<(), ServerError> {
        let _ = self.shutdown.send(true);
        self.wait().await
    }

    /// Runs until `signal` resolves, then shuts down; returns early if the
    /// actor exits on its own (a fatal journal error).
    pub async fn run_until(mut self, signal: impl std::future::Future<Output = ()>) -> Result<(), ServerError> {
        tokio::select! {
            result = &mut self.actor => {
                let _ = self.shutdown.send(true);
                for t in self.tasks {
                    t.abort();
                }
                result.map_err(|e| ServerError::Join(e.to_string()))?
            }
            _ = signal => self.shutdown().await,
        }
    }

    /// Runs until the actor exits (shutdown or a fatal journal error).
    pub async fn wait(self) -> Result<(), ServerError> {
        let result = self.actor.await.map_err(|e| ServerError::Join(e.to_string()))?;
        let _ = self.shutdown.send(true);
        for t in self.tasks {
            t.abort();
        }
        result
    }
}

/// Opens the data directory, replays the journal and starts listening.
/// Port 0 in the config binds an ephemeral port; the bound addresses are on
/// the returned handle.
pub async fn start(cfg: ServerConfig) -> Result<RunningServer, ServerError> {
    let (store, recovered) = Store::open(&cfg.data_dir)?;
    let replayed = recovered.events.len();
    let coordinator = Coordinator::restore(cfg.liveness(), recovered.events, recovered.checkpoints)?;
    info!(
        data_dir = %cfg.data_dir.display(),
        events = replayed,
        tasks = coordinator.list_tasks().len(),
        "journal replayed"
    );

    let wire = TcpListener::bind(cfg.wire_addr)
        .await
        .map_err(|source| ServerError::Bind {
            addr: cfg.wire_addr,
            source,
        })?;
    let http = TcpListener::bind(cfg.http_addr)
        .await
        .map_err(|source| ServerError::Bind {
            addr: cfg.http_addr,
            source,
        })?;
    let wire_addr = wire.local_addr()?;
    let http_addr = http.local_addr()?;

    let (cmd_tx, cmd_rx) = mpsc::channel(4096);
    let (snap_tx, _) = broadcast::channel(SNAPSHOT_QUEUE);
    let (shutdown, shutdown_rx) = watch::channel(false);

    let actor = Actor {
        coordinator,
        store,
        clock: Clock::new(),
        conns: BTreeMap::new(),
        snapshots: snap_tx.clone(),
        tick: Duration::from_millis(cfg.tick_ms),
    };
    let actor = tokio::spawn(actor.run(cmd_rx, shutdown_rx.clone()));

    let accept = tokio::spawn(accept_nodes(wire, cmd_tx.clone(), shutdown_rx.clone()));

    let state = AppState {
        commands: cmd_tx,
        snapshots: snap_tx,
        operator_token: cfg.operator_token.clone().map(Arc::from),
    };
    let mut http_shutdown = shutdown_rx;
    let http_task = tokio::spawn(async move {
        let serve = axum::serve(http, router(state)).with_graceful_shutdown(async move {
            stopped(&mut http_shutdown).await;
        });
        if let Err(e) = serve.await {
            error!(error = %e, "http server failed");
        }
    });
    info!(%wire_addr, %http_addr, "coordinator listening");
    Ok(RunningServer {
        wire_addr,
        http_addr,
        shutdown,
        actor,
        tasks: vec![accept, http_task],
    })
}

async fn stopped(shutdown: &mut watch::Receiver<bool>) {
    // An error means the sender is gone, which also means stop.
    let _ = shutdown.wait_for(|stop| *stop).await;
}

struct Actor {
    coordinator: Coordinator,
    store: Store,
    clock: Clock,
    conns: BTreeMap<ConnId, mpsc::Sender<Envelope>>,
    snapshots: broadcast::Sender<(String, Arc<SessionSnapshot>)>,
    tick: Duration,
}

impl Actor {
    async fn run(
        mut self,
        mut commands: mpsc::Receiver<Command>,
        mut shutdown: watch::Receiver<bool>,
    ) -> Result<(), ServerError> {
        loop {
            let now = self.clock.now();
            let wake = self
                .coordinator
                .next_wakeup()
                .map(|at| self.clock.instant_at(at.max(now)))
                .unwrap_or_else(|| tokio::time::Instant::now() + self.tick)
                .min(tokio::time::Instant::now() + self.tick);
            tokio::select! {
                cmd = commands.recv() => match cmd {
                    Some(cmd) => self.on_command(cmd)?,
                    None => return Ok(()),
                },
                _ = tokio::time::sleep_until(wake) => {
                    let out = self.coordinator.tick(self.clock.now());
                    self.commit(out, BTreeSet::new())?;
                }
                _ = stopped(&mut shutdown) => {
                    info!("coordinator shutting down");
                    return Ok(());
                }
            }
        }
    }

    fn on_command(&mut self, cmd: Command) -> Result<(), ServerError> {
        let now = self.clock.now();
        match cmd {
            Command::Connected { conn, tx } => {
                self.conns.insert(conn, tx);
            }
            Command::Frame { conn, envelope } => {
                let out = self.coordinator.handle(conn, envelope, now);
                self.commit(out, BTreeSet::new())?;
            }
            Command::Closed { conn } => {
                self.conns.remove(&conn);
                let out = self.coordinator.disconnect(conn, now);
                self.commit(out, BTreeSet::new())?;
            }
            Command::Create { spec, reply } => {
                let result = self.coordinator.create_task(*spec, now);
                self.commit(Vec::new(), BTreeSet::new())?;
                let _ = reply.send(result);
            }
            Command::List { reply } => {
                let _ = reply.send(self.coordinator.list_tasks());
            }
            Command::Snapshot { task_id, reply } => {
                let _ = reply.send(self.coordinator.snapshot(&task_id));
            }
            Command::Pause { task_id, reply } => {
                let result = self.coordinator.pause(&task_id, now);
                self.control(task_id, result, reply)?;
            }
            Command::Resume { task_id, reply } => {
                let result = self.coordinator.resume(&task_id, now);
                self.control(task_id, result, reply)?;
            }
        }
        Ok(())
    }

    fn control(
        &mut self,
        task_id: String,
        result: Result<Vec<Outbound>, CoordinatorError>,
        reply: Reply<SessionSnapshot>,
    ) -> Result<(), ServerError> {
        match result {
            Ok(out) => {
                self.commit(out, BTreeSet::from([task_id.clone()]))?;
                let _ = reply.send(self.coordinator.snapshot(&task_id));
            }
            Err(e) => {
                let _ = reply.send(Err(e));
            }
        }
        Ok(())
    }

    /// Journal, then send, then publish. A journal failure is fatal: sending
    /// frames whose cause is not on disk would break restart recovery.
    fn commit(&mut self, out: Vec<Outbound>, mut changed: BTreeSet<String>) -> Result<(), ServerError> {
        let events = self.coordinator.take_events();
        if let Err(e) = self.store.append(&events) {
            error!(error = %e, "journal append failed; stopping");
            return Err(e.into());
        }
        for ev in &events {
            debug!(task = %ev.task_id, "{}", ev.event.describe());
            changed.insert(ev.task_id.clone());
        }
        let mut overflowed = Vec::new();
        for Outbound { to, envelope } in out {
            let Some(tx) = self.conns.get(&to) else { continue };
            if let Err(mpsc::error::TrySendError::Full(_)) = tx.try_send(envelope) {
                overflowed.push(to);
            }
        }
        for conn in overflowed {
            warn!(conn, "send queue full; dropping connection");
            self.conns.remove(&conn);
            let out = self.coordinator.disconnect(conn, self.clock.now());
            self.commit(out, BTreeSet::new())?;
        }
        if self.snapshots.receiver_count() > 0 {
            for task_id in changed {
                if let Ok(snap) = self.coordinator.snapshot(&task_id) {
                    let _ = self.snapshots.send((task_id, Arc::new(snap)));
                }
            }
        }
        Ok(())
    }
}

async fn accept_nodes(listener: TcpListener, commands: mpsc::Sender<Command>, mut shutdown: watch::Receiver<bool>) {
    let mut next_conn: ConnId = 1;
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let conn = next_conn;
                    next_conn += 1;
                    debug!(conn, %peer, "node connected");
                    tokio::spawn(serve_node(conn, stream, commands.clone()));
                }
                Err(e) => {
                    warn!(error = %e, "accept failed");
                    tokio::time::sleep(Duration::from_millis(50)).await;
                }
            },
            _ = stopped(&mut shutdown) => return,
        }
    }
}

async fn serve_node(conn: ConnId, stream: TcpStream, commands: mpsc::Sender<Command>) {
    let _ = stream.set_nodelay(true);
    let (mut reader, mut writer) = stream.into_split();
    let (tx, mut rx) = mpsc::channel::<Envelope>(CONN_QUEUE);
    if commands.send(Command::Connected { conn, tx }).await.is_err() {
        return;
    }
    let write_task = tokio::spawn(async move {
        while let Some(env) = rx.recv().await {
            if let Err(e) = write_frame(&mut writer, &env).await {
                debug!(conn, error = %e, "write failed");
                break;
            }
        }
    });
    loop {
        match read_frame(&mut reader).await {
            Ok(Some(envelope)) => {
                if commands.send(Command::Frame { conn, envelope }).await.is_err() {
                    break;
                }
            }
            Ok(None) => break,
            Err(e) => {
                warn!(conn, error = %e, "closing connection after bad frame");
                break;
            }
        }
    }
    let _ = commands.send(Command::Closed { conn }).await;
    // The actor drops the sender on Closed, which ends the writer.
    let _ = write_task.await;
}

#[derive(Clone)]
struct AppState {
    commands: mpsc::Sender<Command>,
    snapshots: broadcast::Sender<(String, Arc<SessionSnapshot>)>,
    operator_token: Option<Arc<str>>,
}

#[derive(Debug, Serialize)]
struct ApiError {
    error: &'static str,
    detail: String,
}

fn api_error(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Response {
    (
        status,
        Json(ApiError {
            error: code,
            detail: detail.into(),
        }),
    )
        .into_response()
}

impl From<CoordinatorError> for Response {
    fn from(e: CoordinatorError) -> Response {
        let (status, code) = match &e {
            CoordinatorError::InvalidSpec(_) | CoordinatorError::Model(_) => (StatusCode::BAD_REQUEST, "invalid_spec"),
            CoordinatorError::UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
            CoordinatorError::DuplicateTask(_) => (StatusCode::CONFLICT, "duplicate_task"),
            CoordinatorError::InvalidTransition(_) => (StatusCode::CONFLICT, "invalid_transition"),
            CoordinatorError::Restore(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        api_error(status, code, e.to_string())
    }
}

fn unavailable() -> Response {
    api_error(StatusCode::SERVICE_UNAVAILABLE, "unavailable", "coordinator is shutting down")
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/tasks", get(list_tasks).post(create_task))
        .route("/tasks/{id}/snapshot", get(task_snapshot))
        .route("/tasks/{id}/pause", post(pause_task))
        .route("/tasks/{id}/resume", post(resume_task))
        .route("/tasks/{id}/stream", get(stream_task))
        .with_state(state)
}

async fn ask<T>(
    state: &AppState,
    make: impl FnOnce(oneshot::Sender<T>) -> Command,
) -> Result<T, Response> {
    let (tx, rx) = oneshot::channel();
    state.commands.send(make(tx)).await.map_err(|_| unavailable())?;
    rx.await.map_err(|_| unavailable())
}

async fn list_tasks(State(state): State<AppState>) -> Response {
    match ask(&state, |reply| Command::List { reply }).await {
        Ok(tasks) => Json(tasks).into_response(),
        Err(r) => r,
    }
}

async fn create_task(State(state): State<AppState>, body: Bytes) -> Response {
    let spec: TaskSpec = match serde_json::from_slice(&body) {
        Ok(spec) => spec,
        Err(e) => return api_error(StatusCode::BAD_REQUEST, "invalid_spec", e.to_string()),
    };
    let spec = Box::new(spec);
    match ask(&state, |reply| Command::Create { spec, reply }).await {
        Ok(Ok(summary)) => (StatusCode::CREATED, Json(summary)).into_response(),
        Ok(Err(e)) => e.into(),
        Err(r) => r,
    }
}

async fn task_snapshot(State(state): State<AppState>, Path(task_id): Path<String>) -> Response {
    match ask(&state, |reply| Command::Snapshot { task_id, reply }).await {
        Ok(Ok(snap)) => Json(snap).into_response(),
        Ok(Err(e)) => e.into(),
        Err(r) => r,
    }
}

/// Checks the `Authorization: Bearer <token>` header against the configured
/// operator token. Without a configured token, control endpoints are off.
fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), Response> {
    let Some(expected) = state.operator_token.as_deref() else {
        return Err(api_error(
            StatusCode::FORBIDDEN,
            "operator_disabled",
            "no operator token is configured on this server",
        ));
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given.is_some_and(|t| constant_time_eq(t.as_bytes(), expected.as_bytes())) {
        Ok(())
    } else {
        Err(api_error(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong operator token"))
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn pause_task(State(state): State<AppState>, Path(task_id): Path<String>, headers: HeaderMap) -> Response {
    control(state, headers, |reply| Command::Pause { task_id, reply }).await
}

async fn resume_task(State(state): State<AppState>, Path(task_id): Path<String>, headers: HeaderMap) -> Response {
    control(state, headers, |reply| Command::Resume { task_id, reply }).await
}

async fn control(
    state: AppState,
    headers: HeaderMap,
    make: impl FnOnce(Reply<SessionSnapshot>) -> Command,
) -> Response {
    if let Err(r) = authorize(&state, &headers) {
        return r;
    }
    match ask(&state, make).await {
        Ok(Ok(snap)) => Json(snap).into_response(),
        Ok(Err(e)) => e.into(),
        Err(r) => r,
    }
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "camelCase")]
enum StreamMessage<'a> {
    Snapshot { snapshot: &'a SessionSnapshot },
}

async fn stream_task(
    State(state): State<AppState>,
    Path(task_id): Path<String>,
    ws: WebSocketUpgrade,
) -> Response {
    // Subscribe before reading the first snapshot so no change is missed.
    let updates = state.snapshots.subscribe();
    let first = match ask(&state, |reply| Command::Snapshot {
        task_id: task_id.clone(),
        reply,
    })
    .await
    {
        Ok(Ok(snap)) => snap,
        Ok(Err(e)) => return e.into(),
        Err(r) => return r,
    };
    ws.on_upgrade(move |socket| stream_snapshots(socket, state, task_id, first, updates))
}

/// Sends the current snapshot, then one message per change. Each message is
/// a complete snapshot, so a subscriber that lags or reconnects resyncs from
/// any single message.
async fn stream_snapshots(
    socket: WebSocket,
    state: AppState,
    task_id: String,
    first: SessionSnapshot,
    mut updates: broadcast::Receiver<(String, Arc<SessionSnapshot>)>,
) {
    let (mut sink, mut incoming) = socket.split();
    let encode = |snap: &SessionSnapshot| {
        serde_json::to_string(&StreamMessage::Snapshot { snapshot: snap }).expect("snapshots serialize")
    };
    if sink.send(WsMessage::Text(encode(&first).into())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            update = updates.recv() => {
                let snap = match update {
                    Ok((id, snap)) if id == task_id => snap,
                    Ok(_) => continue,
                    Err(broadcast::error::RecvError::Lagged(_)) => {
                        match ask(&state, |reply| Command::Snapshot { task_id: task_id.clone(), reply }).await {
                            Ok(Ok(snap)) => Arc::new(snap),
                            _ => return,
                        }
                    }
                    Err(broadcast::error::RecvError::Closed) => return,
                };
                if sink.send(WsMessage::Text(encode(&snap).into())).await.is_err() {
                    return;
                }
            }
            msg = incoming.next() => match msg {
                Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}
