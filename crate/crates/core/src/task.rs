//! Collaborative task definitions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::Weighting;
use crate::model::{ModelSpec, TrainConfig};
use crate::privacy::PrivacyConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Scheme {
    /// The coordinator aggregates uploaded updates.
    Federated,
    /// Peers exchange updates over a full mesh; the coordinator only brokers.
    Decentralized,
}

/// A named collaborative training task and everything a participant needs to join it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskSpec {
    pub task_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    pub scheme: Scheme,
    #[serde(default)]
    pub secure_aggregation: bool,
    #[serde(default)]
    pub weighting: Weighting,
    pub min_participants: usize,
    #[serde(default = "default_ready_threshold")]
    pub ready_threshold: usize,
    pub total_rounds: u64,
    #[serde(default = "default_round_deadline")]
    pub round_deadline_secs: u64,
}

fn default_ready_threshold() -> usize {
    2
}

fn default_round_deadline() -> u64 {
    60
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("invalid task spec: {0}")]
pub struct TaskSpecError(pub String);

impl TaskSpec {
    /// Checks every task invariant; the error names the one violated.
    pub fn validate(&self) -> Result<(), TaskSpecError> {
        let fail = |m: &str| Err(TaskSpecError(m.to_string()));
        if self.task_id.trim().is_empty() {
            return fail("taskId must not be empty");
        }
        if !self
            .task_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        {
            return fail("taskId may only contain ASCII letters, digits, '-', '_' and '.'");
        }
        // Task ids name directories in the coordinator's store.
        if !self.task_id.starts_with(|c: char| c.is_ascii_alphanumeric()) || self.task_id.len() > 128 {
            return fail("taskId must start with a letter or digit and be at most 128 characters");
        }
        self.model.validate().map_err(|e| TaskSpecError(e.to_string()))?;
        self.train.validate().map_err(|e| TaskSpecError(e.to_string()))?;
        self.privacy.validate().map_err(|e| TaskSpecError(e.to_string()))?;
        if self.min_participants == 0 {
            return fail("minParticipants must be positive");
        }
        if self.ready_threshold == 0 {
            return fail("readyThreshold must be positive");
        }
        if self.secure_aggregation && self.ready_threshold < 2 {
            return fail("readyThreshold must be at least 2 when secureAggregation is enabled");
        }
        if self.secure_aggregation && self.scheme == Scheme::Federated {
            return fail("secureAggregation requires the decentralized scheme");
        }
        if self.total_rounds == 0 {
            return fail("totalRounds must be positive");
        }
        if self.round_deadline_secs == 0 {
            return fail("roundDeadlineSecs must be positive");
        }
        Ok(())
    }

    /// Total local epochs across the session.
    pub fn total_epochs(&self) -> u64 {
        self.total_rounds * self.train.epochs_per_round
    }

    pub fn round_deadline_ms(&self) -> u64 {
        self.round_deadline_secs.saturating_mul(1000)
    }
}
