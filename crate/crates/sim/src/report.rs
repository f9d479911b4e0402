//! Experiment reports and their CSV/JSON export.
//!
//! `report.json` holds the whole [`ExperimentReport`]. `metrics.csv` holds
//! the curves, one row per client epoch and one per global evaluation:
//!
//! | column     | client rows                  | global rows                   |
//! |------------|------------------------------|-------------------------------|
//! | `kind`     | `client`                     | `global`                      |
//! | `slot`     | client slot                  | empty                         |
//! | `clientId` | id at the time of the epoch  | empty                         |
//! | `round`    | round of the epoch (0-based) | aggregated round (0-based)    |
//! | `epoch`    | global epoch (1-based)       | last epoch of the round       |
//! | `loss`     | local training loss          | held-out loss                 |
//! | `accuracy` | local training accuracy      | held-out accuracy             |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use colearn_core::task::Scheme;
use colearn_core::{ClientId, ParamVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version of the `report.json` and `metrics.csv` layouts.
pub const REPORT_VERSION: u32 = 1;
pub const REPORT_JSON: &str = "report.json";
pub const METRICS_CSV: &str = "metrics.csv";

/// One completed round: a federated aggregation or a closed peer exchange,
/// with the resulting global model scored on the held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RoundRecord {
    pub round: u64,
    pub at_ms: u64,
    /// Clients whose contribution is in the aggregate.
    pub participants: Vec<ClientId>,
    /// Peers that reported a failed exchange (decentralized only).
    pub failed: Vec<ClientId>,
    /// Held-out metrics; absent when no peer completed the exchange.
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
}

/// One local epoch as the client measured it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClientEpoch {
    pub client_id: ClientId,
    pub round: u64,
    pub epoch: u64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClientRecord {
    pub slot: usize,
    pub samples: usize,
    /// Ids assigned over the run; a rejoin gets a fresh id.
    pub client_ids: Vec<ClientId>,
    pub epochs: Vec<ClientEpoch>,
    pub rounds_completed: u64,
    pub rounds_failed: u64,
    /// How the last incarnation ended: `completed`, `failed: ...`,
    /// `dropped` or `running`.
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TimelineEntry {
    pub at_ms: u64,
    pub event: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub scenario: String,
    pub scheme: Scheme,
    pub secure_aggregation: bool,
    pub seed: u64,
    pub total_rounds: u64,
    /// Equals `rounds.len()`.
    pub rounds_completed: u64,
    pub session_finished: bool,
    pub finished_at_ms: u64,
    pub rounds: Vec<RoundRecord>,
    pub clients: Vec<ClientRecord>,
    /// Every frame put on the wire, by message type.
    pub message_counts: BTreeMap<String, u64>,
    /// Frames sent to or by the coordinator, by message type.
    pub coordinator_message_counts: BTreeMap<String, u64>,
    /// Frames lost because their recipient had dropped out.
    pub dropped_frames: u64,
    pub timeline: Vec<TimelineEntry>,
    pub final_params: Option<ParamVector>,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
}

/// One `metrics.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CurveRow {
    pub kind: String,
    pub slot: Option<usize>,
    pub client_id: Option<ClientId>,
    pub round: u64,
    pub epoch: u64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ExperimentReport {
    /// Rounds with at least one contribution in the aggregate.
    pub fn aggregation_count(&self) -> usize {
        self.rounds.iter().filter(|r| !r.participants.is_empty()).count()
    }

    /// The curve rows in file order: client epochs by slot, then global
    /// evaluations by round.
    pub fn curve_rows(&self, epochs_per_round: u64) -> Vec<CurveRow> {
        let mut rows = Vec::new();
        for c in &self.clients {
            for e in &c.epochs {
                rows.push(CurveRow {
                    kind: "client".into(),
                    slot: Some(c.slot),
                    client_id: Some(e.client_id),
                    round: e.round,
                    epoch: e.epoch,
                    loss: e.loss,
                    accuracy: e.accuracy,
                });
            }
        }
        for r in &self.rounds {
            if let (Some(loss), Some(accuracy)) = (r.loss, r.accuracy) {
                rows.push(CurveRow {
                    kind: "global".into(),
                    slot: None,
                    client_id: None,
                    round: r.round,
                    epoch: (r.round + 1) * epochs_per_round,
                    loss,
                    accuracy,
                });
            }
        }
        rows
    }

    pub fn to_json(&self) -> Result<Vec<u8>, serde_json::Error> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<ExperimentReport, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    pub fn to_csv(&self, epochs_per_round: u64) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.curve_rows(epochs_per_round) {
            w.serialize(row)?;
        }
        w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
    }
}

/// Parses `metrics.csv` back into rows.
pub fn read_curve_rows(bytes: &[u8]) -> Result<Vec<CurveRow>, csv::Error> {
    csv::Reader::from_reader(bytes).deserialize().collect()
}

/// Writes `report.json` and `metrics.csv` into `dir`, creating it if needed.
pub fn export_report(report: &ExperimentReport, epochs_per_round: u64, dir: impl AsRef<Path>) -> Result<(), ExportError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ExportError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let json = dir.join(REPORT_JSON);
    std::fs::write(&json, report.to_json()?).map_err(io(&json))?;
    let csv = dir.join(METRICS_CSV);
    std::fs::write(&csv, report.to_csv(epochs_per_round)?).map_err(io(&csv))?;
    Ok(())
}
