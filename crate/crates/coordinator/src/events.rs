//! Session events: the journal record format and the source of timelines.

use colearn_core::task::TaskSpec;
use colearn_core::{ClientId, ParamVector};
use serde::{Deserialize, Serialize};

/// Something that happened to a session. Events are emitted after the state
/// change they describe and before any resulting message is delivered, so a
/// journal of them is a write-ahead log of externally visible effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum SessionEvent {
    TaskCreated {
        spec: TaskSpec,
    },
    ClientJoined {
        client_id: ClientId,
        connected: usize,
    },
    ClientDeparted {
        client_id: ClientId,
        reason: String,
        connected: usize,
    },
    RoundStarted {
        round: u64,
        expected: Vec<ClientId>,
    },
    PeersDispatched {
        round: u64,
        peers: Vec<ClientId>,
    },
    /// A ready signal arrived after the peer list went out; the peer is
    /// counted as ready for the next round instead.
    ReadyDeferred {
        round: u64,
        client_id: ClientId,
    },
    UpdateRejected {
        round: u64,
        client_id: ClientId,
        code: String,
    },
    /// Federated aggregation. `global` is the new global model; the journal
    /// stores it in a checkpoint file rather than inline.
    Aggregated {
        round: u64,
        participants: Vec<ClientId>,
        #[serde(skip)]
        global: Option<ParamVector>,
    },
    /// End of a decentralized exchange round.
    RoundClosed {
        round: u64,
        completed: Vec<ClientId>,
        failed: Vec<ClientId>,
    },
    Paused {
        round: u64,
        reason: String,
    },
    OperatorPaused {
        round: u64,
    },
    OperatorResumed {
        round: u64,
    },
    Metric {
        client_id: ClientId,
        round: u64,
        epoch: u64,
        loss: f64,
        accuracy: f64,
    },
    Finished {
        rounds: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TimedEvent {
    pub at_ms: u64,
    pub task_id: String,
    pub event: SessionEvent,
}

impl SessionEvent {
    /// Short human-readable description for logs and timelines.
    pub fn describe(&self) -> String {
        match self {
            SessionEvent::TaskCreated { spec } => format!("task created ({} rounds)", spec.total_rounds),
            SessionEvent::ClientJoined { client_id, connected } => {
                format!("client {client_id} joined ({connected} connected)")
            }
            SessionEvent::ClientDeparted {
                client_id,
                reason,
                connected,
            } => format!("client {client_id} departed: {reason} ({connected} connected)"),
            SessionEvent::RoundStarted { round, expected } => {
                format!("round {round} started with {} clients", expected.len())
            }
            SessionEvent::PeersDispatched { round, peers } => {
                format!("round {round} peer list dispatched to {peers:?}")
            }
            SessionEvent::ReadyDeferred { round, client_id } => {
                format!("client {client_id} deferred from round {round}")
            }
            SessionEvent::UpdateRejected { round, client_id, code } => {
                format!("round {round} update from client {client_id} rejected: {code}")
            }
            SessionEvent::Aggregated { round, participants, .. } => {
                format!("round {round} aggregated over {participants:?}")
            }
            SessionEvent::RoundClosed {
                round,
                completed,
                failed,
            } => format!("round {round} closed; completed {completed:?}, failed {failed:?}"),
            SessionEvent::Paused { round, reason } => format!("paused in round {round}: {reason}"),
            SessionEvent::OperatorPaused { round } => format!("operator paused in round {round}"),
            SessionEvent::OperatorResumed { round } => format!("operator resumed in round {round}"),
            SessionEvent::Metric {
                client_id, epoch, ..
            } => format!("metrics from client {client_id} epoch {epoch}"),
            SessionEvent::Finished { rounds } => format!("finished after {rounds} rounds"),
        }
    }
}
