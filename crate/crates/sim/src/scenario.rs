//! Scenario files: what to simulate, on which data, with which faults.

use std::path::{Path, PathBuf};

use colearn_core::data::{load_csv, load_idx, partition, DataError, Dataset, PartitionPlan};
use colearn_core::rng::{derive_key, draw, normal_at};
use colearn_core::task::TaskSpec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version of the scenario file format.
pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario data: {0}")]
    Data(#[from] DataError),
}

/// When a fault fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Trigger {
    /// At a logical time, in milliseconds since the session was created.
    TimeMs(u64),
    /// The moment the coordinator starts this round (0-based).
    Round(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum FaultEvent {
    /// The client crashes silently: no goodbye, in-flight frames to it are lost.
    DropOut,
    /// A dropped client comes back with the same data and joins afresh.
    Rejoin,
    /// Extra one-way latency on every frame to or from the client from now on.
    Delay { ms: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Fault {
    pub at: Trigger,
    /// Client slot, `0..numClients`. Slot `i` holds data shard `i` and is the
    /// `i`-th client to join, so it is first assigned client id `i + 1`.
    pub client: usize,
    pub event: FaultEvent,
}

/// Where the client shards and the held-out evaluation set come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum DataSpec {
    /// One Gaussian cluster per class around a random centre.
    Blobs {
        rows: usize,
        features: usize,
        classes: usize,
        spread: f64,
        seed: u64,
        holdout: usize,
    },
    /// IDX image/label files (optionally gzipped). The first `trainRows` rows
    /// are partitioned across clients; the next `holdout` rows are held out.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        train_rows: usize,
        holdout: usize,
    },
    /// A CSV file with a label column, split like `Idx`.
    Csv {
        path: PathBuf,
        label_column: String,
        train_rows: usize,
        holdout: usize,
    },
}

/// Timing of the simulated network, in logical milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct NetworkConfig {
    /// One-way latency of every link.
    pub latency_ms: u64,
    /// Logical time a client spends on one local epoch.
    pub train_ms_per_epoch: u64,
    /// The run fails if the session has not ended by then.
    pub max_time_ms: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            latency_ms: 5,
            train_ms_per_epoch: 100,
            max_time_ms: 24 * 3600 * 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    /// Seeds client-side randomness (noise and share masks).
    pub seed: u64,
    pub task: TaskSpec,
    pub num_clients: usize,
    pub partition: PartitionPlan,
    pub data: DataSpec,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub faults: Vec<Fault>,
}

/// Client shards (index = slot) and the held-out set used for global evaluation.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub shards: Vec<Dataset>,
    pub holdout: Dataset,
}

impl Scenario {
    /// Parses a scenario; relative data paths are resolved against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Scenario, ScenarioError> {
        let mut s: Scenario = serde_json::from_str(text)?;
        s.data.resolve(base);
        s.validate()?;
        Ok(s)
    }

    /// Reads a scenario file; relative data paths are relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Scenario::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |m: String| Err(ScenarioError::Invalid(m));
        if self.schema_version != SCENARIO_VERSION {
            return fail(format!(
                "schemaVersion {} is not supported (expected {SCENARIO_VERSION})",
                self.schema_version
            ));
        }
        self.task
            .validate()
            .map_err(|e| ScenarioError::Invalid(format!("task: {e}")))?;
        if self.num_clients == 0 {
            return fail("numClients must be at least 1".into());
        }
        if self.partition.num_clients != self.num_clients {
            return fail(format!(
                "partition.numClients {} differs from numClients {}",
                self.partition.num_clients, self.num_clients
            ));
        }
        if self.network.latency_ms == 0 {
            return fail("network.latencyMs must be at least 1".into());
        }
        for (i, f) in self.faults.iter().enumerate() {
            if f.client >= self.num_clients {
                return fail(format!(
                    "fault {i} targets client {} but there are {} clients",
                    f.client, self.num_clients
                ));
            }
            if let Trigger::Round(r) = f.at {
                if r >= self.task.total_rounds {
                    return fail(format!(
                        "fault {i} fires at round {r} but the task has {} rounds",
                        self.task.total_rounds
                    ));
                }
            }
        }
        Ok(())
    }

    /// Loads or generates the data and splits it across clients.
    pub fn materialize(&self) -> Result<ClientData, ScenarioError> {
        let (train, holdout) = self.data.load()?;
        let spec = &self.task.model;
        if train.n_features() != spec.input_dim {
            return Err(ScenarioError::Invalid(format!(
                "data has {} features but the model expects {}",
                train.n_features(),
                spec.input_dim
            )));
        }
        if train.num_classes() > spec.output_dim {
            return Err(ScenarioError::Invalid(format!(
                "data has {} classes but the model has {} outputs",
                train.num_classes(),
                spec.output_dim
            )));
        }
        let shards = partition(&train, &self.partition)?;
        Ok(ClientData { shards, holdout })
    }
}

impl DataSpec {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataSpec::Blobs { .. } => {}
            DataSpec::Idx { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            DataSpec::Csv { path, .. } => fix(path),
        }
    }

    /// Returns `(training pool, held-out set)`.
    pub fn load(&self) -> Result<(Dataset, Dataset), ScenarioError> {
        match self {
            DataSpec::Blobs {
                rows,
                features,
                classes,
                spread,
                seed,
                holdout,
            } => {
                if *classes < 2 || *features == 0 || *rows == 0 || !(spread.is_finite() && *spread >= 0.0) {
                    return Err(ScenarioError::Invalid(
                        "blobs need rows >= 1, features >= 1, classes >= 2 and a finite spread >= 0".into(),
                    ));
                }
                let all = blobs(rows + holdout, *features, *classes, *spread, *seed);
                Ok(all.split_at(*rows))
            }
            DataSpec::Idx {
                images,
                labels,
                train_rows,
                holdout,
            } => split_pool(load_idx(images, labels)?, *train_rows, *holdout),
            DataSpec::Csv {
                path,
                label_column,
                train_rows,
                holdout,
            } => split_pool(load_csv(path, label_column)?, *train_rows, *holdout),
        }
    }
}

fn split_pool(pool: Dataset, train_rows: usize, holdout: usize) -> Result<(Dataset, Dataset), ScenarioError> {
    if train_rows + holdout > pool.len() {
        return Err(ScenarioError::Invalid(format!(
            "{train_rows} training rows plus {holdout} held-out rows exceed the {} available",
            pool.len()
        )));
    }
    let (train, rest) = pool.split_at(train_rows);
    let (held, _) = rest.split_at(holdout);
    Ok((train, held))
}

/// Gaussian clusters: class centres are standard normal draws scaled by 2,
/// rows add `spread`-scaled noise. Labels are drawn uniformly.
pub fn blobs(rows: usize, features: usize, classes: usize, spread: f64, seed: u64) -> Dataset {
    let centre_key = derive_key(seed, 1);
    let label_key = derive_key(seed, 2);
    let noise_key = derive_key(seed, 3);
    let mut x = Vec::with_capacity(rows * features);
    let mut y = Vec::with_capacity(rows);
    for i in 0..rows {
        let c = (draw(label_key, i as u64) % classes as u64) as usize;
        for d in 0..features {
            let centre = 2.0 * normal_at(centre_key, (c * features + d) as u64);
            x.push(centre + spread * normal_at(noise_key, (i * features + d) as u64));
        }
        y.push(c);
    }
    Dataset::new(x, features, y, classes, format!("blobs-{seed}"))
}
