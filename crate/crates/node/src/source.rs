//! Locating and loading a node's local data.

use std::path::PathBuf;

use colearn_core::data::{load_csv, load_idx, partition_indices, DataError, Dataset, PartitionMode, PartitionPlan};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum DataFormat {
    Csv { path: PathBuf, label_column: String },
    /// IDX image and label files, optionally gzip-compressed.
    Idx { images: PathBuf, labels: PathBuf },
}

/// Takes one IID shard of the loaded rows, so several nodes on one machine
/// can split a shared file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Shard {
    pub index: usize,
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DataSource {
    #[serde(flatten)]
    pub format: DataFormat,
    #[serde(default)]
    pub shard: Option<Shard>,
    /// Keep only the first `limit` rows (after sharding).
    #[serde(default)]
    pub limit: Option<usize>,
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset, DataError> {
        let data = match &self.format {
            DataFormat::Csv { path, label_column } => load_csv(path, label_column)?,
            DataFormat::Idx { images, labels } => load_idx(images, labels)?,
        };
        let data = match self.shard {
            Some(s) => {
                if s.index >= s.count {
                    return Err(DataError::InvalidPlan(format!("shard {} of {}", s.index, s.count)));
                }
                let plan = PartitionPlan {
                    num_clients: s.count,
                    mode: PartitionMode::Iid,
                    seed: s.seed,
                };
                let parts = partition_indices(&data, &plan)?;
                data.subset(&parts[s.index], format!("{} shard {}/{}", data.source_tag, s.index, s.count))
            }
            None => data,
        };
        Ok(match self.limit {
            Some(n) if n < data.len() => data.split_at(n).0,
            _ => data,
        })
    }
}
