//! File-backed session storage: one append-only JSONL log per session (in
//! replay script format), a metadata file with access tokens, and a periodic
//! snapshot used to cross-check recovery.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use qcollab_core::replay::ReplayScript;
use qcollab_core::session::{SessionConfig, SessionEvent, SessionSnapshot};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTokens {
    pub coders: [String; 2],
    pub operator: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredSnapshot {
    pub log_len: usize,
    pub hash: String,
    pub snapshot: SessionSnapshot,
}

pub struct StoredSession {
    pub id: String,
    pub tokens: SessionTokens,
    pub script: ReplayScript,
    pub snapshot: Option<StoredSnapshot>,
}

#[derive(Debug, Clone)]
pub struct Store {
    dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Store {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Store, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Store { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn log_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    fn meta_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.meta.json"))
    }

    fn snapshot_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.snapshot.json"))
    }

    /// Write the metadata and the log header. Fails if the session exists.
    pub fn create(
        &self,
        id: &str,
        tokens: &SessionTokens,
        config: &SessionConfig,
    ) -> Result<(), StoreError> {
        let meta = self.meta_path(id);
        let json = serde_json::to_vec_pretty(tokens).expect("tokens serialize");
        write_atomic(&meta, &json)?;
        let log = self.log_path(id);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&log)
            .map_err(io_err(&log))?;
        writeln!(f, "{}", ReplayScript::header_line(config)).map_err(io_err(&log))?;
        f.sync_data().map_err(io_err(&log))
    }

    pub fn append(&self, id: &str, events: &[SessionEvent]) -> Result<(), StoreError> {
        if events.is_empty() {
            return Ok(());
        }
        let path = self.log_path(id);
        let mut buf = String::new();
        for e in events {
            buf.push_str(&e.to_json_line());
            buf.push('\n');
        }
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        f.write_all(buf.as_bytes()).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))
    }

    pub fn write_snapshot(&self, id: &str, snap: &StoredSnapshot) -> Result<(), StoreError> {
        let json = serde_json::to_vec(snap).expect("snapshot serializes");
        write_atomic(&self.snapshot_path(id), &json)
    }

    pub fn load(&self, id: &str) -> Result<StoredSession, StoreError> {
        let meta = self.meta_path(id);
        let text = fs::read_to_string(&meta).map_err(io_err(&meta))?;
        let tokens = serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path: meta.clone(),
            message: e.to_string(),
        })?;
        let log = self.log_path(id);
        let text = fs::read_to_string(&log).map_err(io_err(&log))?;
        let script = parse_log(&text).map_err(|message| StoreError::Corrupt {
            path: log.clone(),
            message,
        })?;
        let snap_path = self.snapshot_path(id);
        let snapshot = fs::read(&snap_path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        Ok(StoredSession {
            id: id.to_string(),
            tokens,
            script,
            snapshot,
        })
    }

    /// Ids of all stored sessions, sorted.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(io_err(&self.dir))? {
            let entry = entry.map_err(io_err(&self.dir))?;
            let name = entry.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".meta.json")) {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }
}

/// Parse a stored log. A torn final line, left by a crash mid-append, is
/// dropped; damage anywhere else is an error.
fn parse_log(text: &str) -> Result<ReplayScript, String> {
    match ReplayScript::parse(text) {
        Ok(s) => Ok(s),
        Err(first) => {
            let trimmed = text.trim_end_matches('\n');
            let Some(cut) = trimmed.rfind('\n') else {
                return Err(first.to_string());
            };
            ReplayScript::parse(&trimmed[..cut]).map_err(|_| first.to_string())
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_data().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}
