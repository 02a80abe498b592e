//! Record/replay store for model calls, persisted as newline-delimited
//! fixture records keyed by request hash.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backend::{Backend, BackendError};
use super::request::{request_hash, Decoding, ModelRequest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    Record,
    Replay,
    Passthrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub hash: String,
    pub system_prompt: String,
    pub user_prompt: String,
    pub decoding: Decoding,
    pub response_text: String,
    pub recorded_at: String,
}

pub type Clock = Arc<dyn Fn() -> String + Send + Sync>;

/// Wall-clock RFC 3339 timestamps, pinned by `SOURCE_DATE_EPOCH` when set.
pub fn default_clock() -> Clock {
    Arc::new(|| {
        let secs = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|v| v.parse::<i64>().ok())
            .unwrap_or_else(|| {
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs() as i64)
                    .unwrap_or(0)
            });
        rfc3339(secs)
    })
}

pub fn fixed_clock(stamp: &str) -> Clock {
    let stamp = stamp.to_string();
    Arc::new(move || stamp.clone())
}

pub(crate) fn rfc3339(secs: i64) -> String {
    chrono::DateTime::from_timestamp(secs, 0)
        .unwrap_or_default()
        .format("%Y-%m-%dT%H:%M:%SZ")
        .to_string()
}

pub struct ReplayStore {
    mode: ReplayMode,
    path: Option<PathBuf>,
    entries: RwLock<BTreeMap<String, FixtureRecord>>,
    inner: Option<Arc<dyn Backend>>,
    clock: Clock,
    write_lock: Mutex<()>,
}

impl ReplayStore {
    /// Replay from an existing fixture file. No inner backend is held, so no
    /// live call is possible.
    pub fn replay(path: &Path) -> Result<Self> {
        let entries = load_fixture(path)?;
        Ok(ReplayStore {
            mode: ReplayMode::Replay,
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            inner: None,
            clock: default_clock(),
            write_lock: Mutex::new(()),
        })
    }

    pub fn from_records(records: Vec<FixtureRecord>) -> Self {
        ReplayStore {
            mode: ReplayMode::Replay,
            path: None,
            entries: RwLock::new(records.into_iter().map(|r| (r.hash.clone(), r)).collect()),
            inner: None,
            clock: default_clock(),
            write_lock: Mutex::new(()),
        }
    }

    /// Record every call made through `inner`; [`flush`](Self::flush) writes
    /// the fixture file.
    pub fn record(path: &Path, inner: Arc<dyn Backend>) -> Self {
        ReplayStore {
            mode: ReplayMode::Record,
            path: Some(path.to_path_buf()),
            entries: RwLock::new(BTreeMap::new()),
            inner: Some(inner),
            clock: default_clock(),
            write_lock: Mutex::new(()),
        }
    }

    pub fn passthrough(inner: Arc<dyn Backend>) -> Self {
        ReplayStore {
            mode: ReplayMode::Passthrough,
            path: None,
            entries: RwLock::new(BTreeMap::new()),
            inner: Some(inner),
            clock: default_clock(),
            write_lock: Mutex::new(()),
        }
    }

    /// Attaches an inner backend to a replay store. Only used to prove the
    /// inner backend is never reached.
    pub fn with_inner(mut self, inner: Arc<dyn Backend>) -> Self {
        self.inner = Some(inner);
        self
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn mode(&self) -> ReplayMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("replay lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<FixtureRecord> {
        self.entries.read().expect("replay lock").values().cloned().collect()
    }

    /// Writes all records sorted by hash, via a temp file and rename.
    pub fn flush(&self) -> Result<Option<PathBuf>> {
        let Some(path) = &self.path else { return Ok(None) };
        if self.mode != ReplayMode::Record {
            return Ok(None);
        }
        let _guard = self.write_lock.lock().expect("replay write lock");
        let records = self.records();
        write_fixture(path, &records)?;
        Ok(Some(path.clone()))
    }
}

impl Backend for ReplayStore {
    fn call(&self, request: &ModelRequest, timeout: Duration) -> std::result::Result<String, BackendError> {
        match self.mode {
            ReplayMode::Replay => {
                let hash = request.hash();
                self.entries
                    .read()
                    .expect("replay lock")
                    .get(&hash)
                    .map(|r| r.response_text.clone())
                    .ok_or(BackendError::ReplayMiss(hash))
            }
            ReplayMode::Passthrough => self.inner_backend()?.call(request, timeout),
            ReplayMode::Record => {
                let text = self.inner_backend()?.call(request, timeout)?;
                let record = FixtureRecord {
                    hash: request.hash(),
                    system_prompt: request.system_prompt.clone(),
                    user_prompt: request.user_prompt.clone(),
                    decoding: request.decoding,
                    response_text: text.clone(),
                    recorded_at: (self.clock)(),
                };
                let _guard = self.write_lock.lock().expect("replay write lock");
                self.entries
                    .write()
                    .expect("replay lock")
                    .insert(record.hash.clone(), record);
                Ok(text)
            }
        }
    }
}

impl ReplayStore {
    fn inner_backend(&self) -> std::result::Result<&Arc<dyn Backend>, BackendError> {
        self.inner
            .as_ref()
            .ok_or_else(|| BackendError::Fatal("replay store has no inner backend".into()))
    }
}

/// Reads a fixture file, verifying each record's hash against its content.
pub fn load_fixture(path: &Path) -> Result<BTreeMap<String, FixtureRecord>> {
    let text = crate::taxonomy::read_text(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: FixtureRecord = serde_json::from_str(line).map_err(|e| Error::ParseError {
            line: i as u64 + 1,
            reason: format!("{}: {e}", path.display()),
        })?;
        let expected = request_hash(&record.system_prompt, &record.user_prompt, &record.decoding);
        if expected != record.hash {
            return Err(Error::SchemaViolation(format!(
                "{} line {}: hash does not match record content",
                path.display(),
                i + 1
            )));
        }
        out.insert(record.hash.clone(), record);
    }
    Ok(out)
}

pub fn write_fixture(path: &Path, records: &[FixtureRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::json("fixture record", e))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let tmp = path.with_extension(format!(
        "{}tmp",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    f.write_all(bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    f.sync_all().map_err(|e| Error::io(format!("syncing {}", tmp.display()), e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}
