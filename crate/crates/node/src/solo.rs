//! Training without a server, evaluation, and the local metrics file.

use std::path::Path;

use colearn_core::data::Dataset;
use colearn_core::model::{self, init_params, train_epochs, ModelError};
use colearn_core::task::TaskSpec;
use colearn_core::ParamVector;

use crate::machine::MetricRecord;

#[derive(Debug, Clone)]
pub struct SoloOutcome {
    pub params: ParamVector,
    pub metrics: Vec<MetricRecord>,
}

/// Trains the task's model on local data alone for
/// `totalRounds * epochsPerRound` epochs, with the same epoch shuffles a
/// collaborative run would use.
pub fn run_solo(spec: &TaskSpec, data: &Dataset) -> Result<SoloOutcome, ModelError> {
    let start = init_params(&spec.model)?;
    let per_round = spec.train.epochs_per_round;
    let outcome = train_epochs(&start, data, &spec.train, 0, spec.total_epochs())?;
    let metrics = outcome
        .epochs
        .iter()
        .map(|m| MetricRecord {
            round: m.epoch / per_round,
            epoch: m.epoch + 1,
            loss: m.loss,
            accuracy: m.accuracy,
        })
        .collect();
    Ok(SoloOutcome {
        params: outcome.params,
        metrics,
    })
}

/// Loss and accuracy of `params` on `data`.
pub fn evaluate(params: &ParamVector, data: &Dataset) -> Result<(f64, f64), ModelError> {
    model::evaluate(params, data)
}

/// Writes `round,epoch,loss,accuracy` rows for offline plotting.
pub fn write_metrics_csv(path: impl AsRef<Path>, metrics: &[MetricRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}
