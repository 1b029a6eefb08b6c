//! Append-only JSON-lines decision log with a single serialized writer.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use tokio::sync::Mutex;

use sepsis_core::study::{read_decision_log, DecisionRecord};

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Corrupt { path: String, message: String },
    #[error("idempotency key {0} was already used for a different decision")]
    KeyConflict(String),
    #[error("record {0} does not exist")]
    UnknownSupersedes(String),
    #[error("record {0} belongs to a different participant or case")]
    ForeignSupersedes(String),
}

pub enum Appended {
    Created(DecisionRecord),
    /// The idempotency key was seen before; nothing was written.
    Replayed(DecisionRecord),
}

struct Inner {
    file: File,
    records: Vec<DecisionRecord>,
    by_key: HashMap<String, usize>,
    by_id: HashMap<String, usize>,
}

pub struct DecisionLog {
    path: PathBuf,
    inner: Mutex<Inner>,
}

/// Equal up to the server-assigned fields.
fn same_submission(a: &DecisionRecord, b: &DecisionRecord) -> bool {
    a.participant_id == b.participant_id
        && a.role == b.role
        && a.years_experience == b.years_experience
        && a.case_id == b.case_id
        && a.condition == b.condition
        && a.fluid_choice == b.fluid_choice
        && a.vaso_choice == b.vaso_choice
        && a.likert == b.likert
        && a.supersedes == b.supersedes
}

impl DecisionLog {
    /// Opens (creating if needed) the log and indexes its records.
    pub fn open(path: &Path) -> Result<Self, LogError> {
        let io = |source| LogError::Io {
            path: path.display().to_string(),
            source,
        };
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io(e)),
        };
        let records = read_decision_log(&text).map_err(|e| LogError::Corrupt {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        if !text.is_empty() && !text.ends_with('\n') {
            file.write_all(b"\n").map_err(io)?;
        }
        let mut by_key = HashMap::new();
        let mut by_id = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if let Some(k) = &r.idempotency_key {
                by_key.entry(k.clone()).or_insert(i);
            }
            by_id.insert(r.record_id.clone(), i);
        }
        Ok(Self {
            path: path.to_path_buf(),
            inner: Mutex::new(Inner {
                file,
                records,
                by_key,
                by_id,
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends `record` unless its idempotency key is already in the log.
    pub async fn append(&self, record: DecisionRecord) -> Result<Appended, LogError> {
        let mut g = self.inner.lock().await;
        if let Some(key) = &record.idempotency_key {
            if let Some(&i) = g.by_key.get(key) {
                let existing = &g.records[i];
                return if same_submission(existing, &record) {
                    Ok(Appended::Replayed(existing.clone()))
                } else {
                    Err(LogError::KeyConflict(key.clone()))
                };
            }
        }
        if let Some(prev) = &record.supersedes {
            let Some(&i) = g.by_id.get(prev) else {
                return Err(LogError::UnknownSupersedes(prev.clone()));
            };
            let p = &g.records[i];
            if p.participant_id != record.participant_id || p.case_id != record.case_id {
                return Err(LogError::ForeignSupersedes(prev.clone()));
            }
        }
        let mut line = serde_json::to_vec(&record).expect("record serializes");
        line.push(b'\n');
        let io = |source| LogError::Io {
            path: self.path.display().to_string(),
            source,
        };
        g.file.write_all(&line).map_err(io)?;
        g.file.sync_data().map_err(io)?;
        let i = g.records.len();
        if let Some(k) = &record.idempotency_key {
            g.by_key.insert(k.clone(), i);
        }
        g.by_id.insert(record.record_id.clone(), i);
        g.records.push(record.clone());
        Ok(Appended::Created(record))
    }

    pub async fn snapshot(&self) -> Vec<DecisionRecord> {
        self.inner.lock().await.records.clone()
    }
}
