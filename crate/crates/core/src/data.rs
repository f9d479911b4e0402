//! Local datasets: CSV and IDX loading, and partitioning across simulated clients.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_key, CounterRng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error("row {row} has {found} columns, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-numeric cell {value:?} at row {row}, column {column}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("unknown label column {0:?}")]
    UnknownLabelColumn(String),
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated IDX file: {0}")]
    Truncated(String),
    #[error("dataset is empty")]
    Empty,
    #[error("cannot split {rows} rows across {clients} clients")]
    TooManyClients { rows: usize, clients: usize },
    #[error("invalid partition plan: {0}")]
    InvalidPlan(String),
}

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    num_classes: usize,
    pub source_tag: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        num_classes: usize,
        source_tag: impl Into<String>,
    ) -> Self {
        assert_eq!(features.len(), n_features * labels.len(), "rows(X) != len(y)");
        assert!(
            labels.iter().all(|&l| l < num_classes),
            "label outside [0, num_classes)"
        );
        Self {
            features,
            n_features,
            labels,
            num_classes,
            source_tag: source_tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Copies the given rows, in the given order.
    pub fn subset(&self, indices: &[usize], tag: impl Into<String>) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, self.n_features, labels, self.num_classes, tag)
    }

    /// First `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (
            self.subset(&head, format!("{}[..{n}]", self.source_tag)),
            self.subset(&tail, format!("{}[{n}..]", self.source_tag)),
        )
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Overrides the class count, e.g. so every client shard agrees on the output width.
    pub fn with_num_classes(mut self, num_classes: usize) -> Dataset {
        assert!(self.labels.iter().all(|&l| l < num_classes));
        self.num_classes = num_classes;
        self
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads a headered CSV file. `label_column` is a header name, or a zero-based
/// index when no header matches.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    parse_csv(file, label_column, &path.display().to_string())
}

/// Parses CSV text. Features are min-max scaled per column (a constant column
/// becomes all zeros). Labels that are all non-negative integers are used
/// as-is; otherwise they are encoded by order of first appearance.
pub fn parse_csv(reader: impl Read, label_column: &str, tag: &str) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .or_else(|| {
            label_column
                .parse::<usize>()
                .ok()
                .filter(|&i| i < headers.len())
        })
        .ok_or_else(|| DataError::UnknownLabelColumn(label_column.to_string()))?;

    let width = headers.len();
    let n_features = width - 1;
    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        if record.len() != width {
            return Err(DataError::RaggedRow {
                row,
                expected: width,
                found: record.len(),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                raw_labels.push(cell.to_string());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                row,
                column: headers[col].clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonNumeric {
                    row,
                    column: headers[col].clone(),
                    value: cell.to_string(),
                });
            }
            features.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(DataError::Empty);
    }

    min_max_scale(&mut features, n_features);
    let labels = encode_labels(&raw_labels);
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset::new(features, n_features, labels, num_classes, tag))
}

fn min_max_scale(features: &mut [f64], n_features: usize) {
    if n_features == 0 {
        return;
    }
    for col in 0..n_features {
        let column = features.iter().skip(col).step_by(n_features);
        let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let span = hi - lo;
        for v in features.iter_mut().skip(col).step_by(n_features) {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
}

fn encode_labels(raw: &[String]) -> Vec<usize> {
    let numeric: Option<Vec<usize>> = raw.iter().map(|s| s.parse::<usize>().ok()).collect();
    if let Some(labels) = numeric {
        return labels;
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    raw.iter()
        .map(|s| {
            let next = seen.len();
            *seen.entry(s.as_str()).or_insert(next)
        })
        .collect()
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = std::fs::read(path).map_err(io_err(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads an IDX image/label pair (optionally gzip-compressed).
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset, DataError> {
    let images = read_maybe_gz(images_path.as_ref())?;
    let labels = read_maybe_gz(labels_path.as_ref())?;
    parse_idx(&images, &labels, &images_path.as_ref().display().to_string())
}

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Truncated(format!("{what} header")))
}

/// Decodes in-memory IDX buffers. Pixels are divided by 255.
pub fn parse_idx(images: &[u8], labels: &[u8], tag: &str) -> Result<Dataset, DataError> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n_images = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n_images != n_labels {
        return Err(DataError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let pixels = rows * cols;
    let body = &images[16..];
    if body.len() < n_images * pixels {
        return Err(DataError::Truncated(format!(
            "images: need {} bytes, have {}",
            n_images * pixels,
            body.len()
        )));
    }
    let label_body = &labels[8..];
    if label_body.len() < n_labels {
        return Err(DataError::Truncated(format!(
            "labels: need {n_labels} bytes, have {}",
            label_body.len()
        )));
    }
    let features = body[..n_images * pixels]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = label_body[..n_labels].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Ok(Dataset::new(features, pixels, labels, num_classes, tag))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum PartitionMode {
    Iid,
    /// Per-class client proportions drawn from a symmetric Dirichlet(alpha).
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PartitionPlan {
    pub num_clients: usize,
    pub mode: PartitionMode,
    pub seed: u64,
}

/// Returns the row indices assigned to each client.
pub fn partition_indices(dataset: &Dataset, plan: &PartitionPlan) -> Result<Vec<Vec<usize>>, DataError> {
    let rows = dataset.len();
    let clients = plan.num_clients;
    if clients == 0 {
        return Err(DataError::InvalidPlan("numClients must be positive".into()));
    }
    if clients > rows {
        return Err(DataError::TooManyClients { rows, clients });
    }
    match plan.mode {
        PartitionMode::Iid => {
            let mut order: Vec<usize> = (0..rows).collect();
            CounterRng::new(derive_key(plan.seed, 0)).shuffle(&mut order);
            let base = rows / clients;
            let extra = rows % clients;
            let mut out = Vec::with_capacity(clients);
            let mut start = 0;
            for c in 0..clients {
                let size = base + usize::from(c < extra);
                out.push(order[start..start + size].to_vec());
                start += size;
            }
            Ok(out)
        }
        PartitionMode::Dirichlet { alpha } => {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(DataError::InvalidPlan(format!("alpha must be positive, got {alpha}")));
            }
            let gamma = Gamma::new(alpha, 1.0)
                .map_err(|e| DataError::InvalidPlan(e.to_string()))?;
            let mut out = vec![Vec::new(); clients];
            for class in 0..dataset.num_classes() {
                let mut members: Vec<usize> =
                    (0..rows).filter(|&i| dataset.label(i) == class).collect();
                if members.is_empty() {
                    continue;
                }
                let class_key = derive_key(plan.seed, 1 + class as u64);
                CounterRng::new(derive_key(class_key, 0)).shuffle(&mut members);
                let mut rng = CounterRng::new(derive_key(class_key, 1));
                let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                let n = members.len();
                let mut cum = 0.0;
                let mut start = 0;
                for (c, d) in draws.iter().enumerate() {
                    cum += d / total;
                    let end = if c + 1 == clients {
                        n
                    } else {
                        ((cum * n as f64).floor() as usize).clamp(start, n)
                    };
                    out[c].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
            // Every client needs at least one sample: take one from the largest
            // (lowest index on ties) until nobody is empty.
            while let Some(empty) = out.iter().position(Vec::is_empty) {
                let donor = (0..clients)
                    .max_by(|&a, &b| out[a].len().cmp(&out[b].len()).then(b.cmp(&a)))
                    .unwrap();
                let moved = out[donor].pop().unwrap();
                out[empty].push(moved);
            }
            Ok(out)
        }
    }
}

pub fn partition(dataset: &Dataset, plan: &PartitionPlan) -> Result<Vec<Dataset>, DataError> {
    Ok(partition_indices(dataset, plan)?
        .iter()
        .enumerate()
        .map(|(c, idx)| dataset.subset(idx, format!("{}#client{c}", dataset.source_tag)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(rows: usize, classes: usize) -> Dataset {
        let features = (0..rows).map(|i| i as f64).collect();
        let labels = (0..rows).map(|i| i % classes).collect();
        Dataset::new(features, 1, labels, classes, "toy")
    }

    #[test]
    fn csv_first_appearance_labels() {
        let text = "x,y,label\n1,2,a\n3,4,b\n5,6,a\n";
        let d = parse_csv(text.as_bytes(), "label", "t").unwrap();
        assert_eq!(d.labels(), &[0, 1, 0]);
        assert_eq!(d.row(0), &[0.0, 0.0]);
        assert_eq!(d.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn csv_constant_column_scales_to_zero() {
        let text = "c,label\n7,1\n7,0\n7,1\n";
        let d = parse_csv(text.as_bytes(), "label", "t").unwrap();
        assert_eq!(d.features(), &[0.0, 0.0, 0.0]);
        assert_eq!(d.labels(), &[1, 0, 1]);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(
            parse_csv("a,b\n1,2\n".as_bytes(), "zzz", "t"),
            Err(DataError::UnknownLabelColumn(_))
        ));
        assert!(matches!(
            parse_csv("a,label\n1,2\n3\n".as_bytes(), "label", "t"),
            Err(DataError::RaggedRow { row: 1, .. })
        ));
        assert!(matches!(
            parse_csv("a,label\nfoo,2\n".as_bytes(), "label", "t"),
            Err(DataError::NonNumeric { .. })
        ));
        assert!(matches!(
            parse_csv("a,label\n".as_bytes(), "label", "t"),
            Err(DataError::Empty)
        ));
    }

    #[test]
    fn csv_label_by_index() {
        let d = parse_csv("a,b\n1,x\n2,y\n".as_bytes(), "1", "t").unwrap();
        assert_eq!(d.labels(), &[0, 1]);
    }

    fn idx_pair(pixels: &[u8], n_labels: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&n_labels.to_be_bytes());
        lab.extend(std::iter::repeat_n(3u8, n_labels as usize));
        (img, lab)
    }

    #[test]
    fn idx_scaling() {
        let (img, lab) = idx_pair(&[0, 255, 128, 64], 1);
        let d = parse_idx(&img, &lab, "t").unwrap();
        assert_eq!(d.row(0), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert_eq!(d.labels(), &[3]);
    }

    #[test]
    fn idx_errors() {
        let (img, lab) = idx_pair(&[0, 255, 128, 64], 2);
        assert!(matches!(
            parse_idx(&img, &lab, "t"),
            Err(DataError::CountMismatch { images: 1, labels: 2 })
        ));
        let (img, lab) = idx_pair(&[0, 255, 128], 1);
        assert!(matches!(parse_idx(&img, &lab, "t"), Err(DataError::Truncated(_))));
        let (mut img, lab) = idx_pair(&[0, 255, 128, 64], 1);
        img[3] = 0x01;
        assert!(matches!(parse_idx(&img, &lab, "t"), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn iid_sizes() {
        let plan = PartitionPlan {
            num_clients: 2,
            mode: PartitionMode::Iid,
            seed: 1,
        };
        let parts = partition(&toy(10, 2), &plan).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).collect::<Vec<_>>(), vec![5, 5]);
        let plan = PartitionPlan { num_clients: 3, ..plan };
        let sizes: Vec<usize> = partition(&toy(10, 2), &plan)
            .unwrap()
            .iter()
            .map(Dataset::len)
            .collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn too_many_clients() {
        let plan = PartitionPlan {
            num_clients: 11,
            mode: PartitionMode::Iid,
            seed: 1,
        };
        assert!(matches!(
            partition(&toy(10, 2), &plan),
            Err(DataError::TooManyClients { rows: 10, clients: 11 })
        ));
    }

    #[test]
    fn dirichlet_repair_gives_everyone_a_sample() {
        // Tiny alpha concentrates each class on one client; repair must fill the rest.
        let plan = PartitionPlan {
            num_clients: 8,
            mode: PartitionMode::Dirichlet { alpha: 0.01 },
            seed: 3,
        };
        let parts = partition_indices(&toy(40, 2), &plan).unwrap();
        assert!(parts.iter().all(|p| !p.is_empty()));
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }
}
