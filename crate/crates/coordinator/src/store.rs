//! Single-directory persistence for coordinator state.
//!
//! Layout under the data directory:
//!
//! - `journal.jsonl` — one JSON-encoded [`TimedEvent`] per line, appended in
//!   order and synced before the corresponding messages are sent.
//! - `checkpoints/<taskId>/round-<n>.dsc1` — global model after federated
//!   round `n`, in the DSC1 checkpoint format. The file is written (via a
//!   temporary file and rename) before the journal line that names its round,
//!   and older rounds are removed afterwards.
//!
//! Replaying the journal with [`Coordinator::restore`](crate::Coordinator::restore)
//! recovers the task registry, completed rounds, metrics and the latest
//! global models.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use colearn_core::params::ParamError;
use colearn_core::ParamVector;
use thiserror::Error;

use crate::events::{SessionEvent, TimedEvent};

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("journal line {line} is corrupt: {detail}")]
    Corrupt { line: usize, detail: String },
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: ParamError },
}

/// Everything read back from a data directory.
#[derive(Debug, Default)]
pub struct Recovered {
    pub events: Vec<TimedEvent>,
    /// Latest global model per federated task.
    pub checkpoints: BTreeMap<String, ParamVector>,
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    journal: File,
}

impl Store {
    /// Opens (creating if needed) a data directory and reads back its contents.
    pub fn open(dir: impl AsRef<Path>) -> Result<(Store, Recovered), StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
        let path = dir.join(JOURNAL_FILE);
        let events = if path.exists() { read_journal(&path)? } else { Vec::new() };
        let mut last_round: BTreeMap<String, u64> = BTreeMap::new();
        for ev in &events {
            if let SessionEvent::Aggregated { round, .. } = ev.event {
                last_round.insert(ev.task_id.clone(), round);
            }
        }
        let mut checkpoints = BTreeMap::new();
        for (task, round) in last_round {
            let path = checkpoint_path(&dir, &task, round);
            let params = ParamVector::load(&path).map_err(|source| StoreError::Checkpoint {
                path: path.clone(),
                source,
            })?;
            checkpoints.insert(task, params);
        }
        let journal = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((Store { dir, journal }, Recovered { events, checkpoints }))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Persists a batch of events. Returns once the journal is synced.
    pub fn append(&mut self, events: &[TimedEvent]) -> Result<(), StoreError> {
        if events.is_empty() {
            return Ok(());
        }
        let mut obsolete = Vec::new();
        for ev in events {
            if let SessionEvent::Aggregated {
                round,
                global: Some(params),
                ..
            } = &ev.event
            {
                let path = checkpoint_path(&self.dir, &ev.task_id, *round);
                fs::create_dir_all(path.parent().expect("checkpoint path has a parent"))?;
                let tmp = path.with_extension("tmp");
                fs::write(&tmp, params.to_checkpoint_bytes())?;
                File::open(&tmp)?.sync_all()?;
                fs::rename(&tmp, &path)?;
                if *round > 0 {
                    obsolete.push(checkpoint_path(&self.dir, &ev.task_id, round - 1));
                }
            }
        }
        let mut buf = Vec::new();
        for ev in events {
            serde_json::to_writer(&mut buf, ev).map_err(io::Error::other)?;
            buf.push(b'\n');
        }
        self.journal.write_all(&buf)?;
        self.journal.sync_data()?;
        for path in obsolete {
            match fs::remove_file(&path) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, task_id: &str, round: u64) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(task_id).join(format!("round-{round}.dsc1"))
}

/// Reads journal lines. A torn final line (crash mid-append) is ignored;
/// corruption anywhere else is an error.
fn read_journal(path: &Path) -> Result<Vec<TimedEvent>, StoreError> {
    let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<Result<_, _>>()?;
    let complete = fs::read(path)?.last().is_none_or(|b| *b == b'\n');
    let mut events = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(ev) => events.push(ev),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => {
                return Err(StoreError::Corrupt {
                    line: i + 1,
                    detail: e.to_string(),
                })
            }
        }
    }
    Ok(events)
}
