//! Append-only JSONL event log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use mac_core::api::LiveTes;
use mac_core::dialog::DialogContext;

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Started {
        session_id: String,
        arm: String,
        pool_index: usize,
        context: DialogContext,
    },
    Completed {
        session_id: String,
        typed: String,
        /// Text shown to the user; empty when nothing was shown.
        text: String,
        confidence: f64,
        /// Model that produced the text. Differs from the arm for routers.
        served_by: String,
        latency_ms: f64,
        overhead_ms: f64,
        degraded: bool,
    },
    Accepted {
        session_id: String,
        n_chars: usize,
        live_tes: LiveTes,
    },
    Rated {
        session_id: String,
        rating: u8,
        final_text: String,
        live_tes: LiveTes,
    },
}

impl Event {
    pub fn session_id(&self) -> &str {
        match self {
            Event::Started { session_id, .. }
            | Event::Completed { session_id, .. }
            | Event::Accepted { session_id, .. }
            | Event::Rated { session_id, .. } => session_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub ts_ms: u64,
    #[serde(flatten)]
    pub event: Event,
}

/// Events go to a file when one is configured and are always kept in order
/// of arrival.
pub struct EventStore {
    path: Option<PathBuf>,
    file: Mutex<Option<File>>,
}

impl EventStore {
    pub fn in_memory() -> Self {
        EventStore {
            path: None,
            file: Mutex::new(None),
        }
    }

    /// Opens `path` for appending and returns what it already holds.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<Record>)> {
        let path = path.as_ref();
        let existing = if path.exists() { read_log(path)? } else { Vec::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| store_err(path, e))?;
        Ok((
            EventStore {
                path: Some(path.to_path_buf()),
                file: Mutex::new(Some(file)),
            },
            existing,
        ))
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&self, event: Event) -> Result<Record> {
        let record = Record {
            ts_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            event,
        };
        let mut guard = self.file.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(f) = guard.as_mut() {
            let mut line = serde_json::to_vec(&record).expect("events serialize");
            line.push(b'\n');
            let path = self.path.as_deref().unwrap_or(Path::new("<log>"));
            f.write_all(&line).map_err(|e| store_err(path, e))?;
        }
        Ok(record)
    }
}

fn store_err(path: &Path, source: std::io::Error) -> ServiceError {
    ServiceError::Store {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a log. A torn final line, as left by a crash mid-write, is dropped.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| store_err(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| store_err(path, e))?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(e) if i + 1 == lines.len() => log::warn!("dropping torn last line of {}: {e}", path.display()),
            Err(source) => return Err(ServiceError::Replay { line: i + 1, source }),
        }
    }
    Ok(out)
}
