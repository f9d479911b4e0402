//! Read-only views of session state for operators and dashboards.
//!
//! Snapshots never contain model parameters or shares.

use colearn_core::aggregation::Weighting;
use colearn_core::task::Scheme;
use colearn_core::ClientId;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Phase {
    WaitingForParticipants,
    Training,
    Aggregating,
    PeerExchange,
    Finished,
}

/// One epoch of a client's local training, as reported by the client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochPoint {
    pub round: u64,
    /// Global epoch number, 1-based, counted across rounds.
    pub epoch: u64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClientSeries {
    pub client_id: ClientId,
    pub points: Vec<EpochPoint>,
}

/// A completed round: a federated aggregation or a closed peer exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AggregationRecord {
    pub round: u64,
    pub at_ms: u64,
    pub participants: Vec<ClientId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskSummary {
    pub task_id: String,
    pub title: String,
    pub scheme: Scheme,
    pub phase: Phase,
    pub current_round: u64,
    pub total_rounds: u64,
    pub participant_count: usize,
    pub secure_aggregation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionSnapshot {
    pub task_id: String,
    pub title: String,
    pub description: String,
    pub scheme: Scheme,
    pub secure_aggregation: bool,
    pub weighting: Weighting,
    pub phase: Phase,
    /// Index of the round in progress; equals the number of completed rounds.
    pub current_round: u64,
    pub total_rounds: u64,
    pub epochs_per_round: u64,
    pub min_participants: usize,
    pub ready_threshold: usize,
    pub participant_count: usize,
    pub clients: Vec<ClientId>,
    pub paused_by_operator: bool,
    pub pause_reason: Option<String>,
    pub series: Vec<ClientSeries>,
    pub aggregations: Vec<AggregationRecord>,
}

impl SessionSnapshot {
    pub fn summary(&self) -> TaskSummary {
        TaskSummary {
            task_id: self.task_id.clone(),
            title: self.title.clone(),
            scheme: self.scheme,
            phase: self.phase,
            current_round: self.current_round,
            total_rounds: self.total_rounds,
            participant_count: self.participant_count,
            secure_aggregation: self.secure_aggregation,
        }
    }

    /// Number of metric points across all clients.
    pub fn metric_count(&self) -> usize {
        self.series.iter().map(|s| s.points.len()).sum()
    }
}
