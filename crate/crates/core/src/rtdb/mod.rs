//! Real-time variable database.
//!
//! A hierarchical, typed, revisioned store that is the only medium through
//! which residents and interfaces exchange state. Every write receives a
//! database-wide revision number; subscribers see matching writes in revision
//! order. The whole state can be captured into a [`Snapshot`] and restored.

mod path;
mod snapshot;
mod value;

use std::collections::BTreeMap;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimClock;

pub(crate) use path::p;
pub use path::VarPath;
pub use snapshot::{Snapshot, SnapshotRecord, SNAPSHOT_MAGIC};
pub use value::{TypeTag, VarValue};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RtdbError {
    #[error("invalid path {0:?}")]
    InvalidPath(String),
    #[error("type mismatch on {path}: stored {stored}, got {given}")]
    TypeMismatch {
        path: VarPath,
        stored: TypeTag,
        given: TypeTag,
    },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("not found: {0}")]
    NotFound(VarPath),
    #[error("snapshot format error at line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("subscription stream closed")]
    StreamClosed,
}

/// One stored variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbEntry {
    pub path: VarPath,
    pub value: VarValue,
    pub revision: u64,
    pub wall_time: DateTime<Utc>,
    pub writer: String,
}

struct SubSlot {
    prefix: Option<VarPath>,
    tx: Sender<DbEntry>,
}

#[derive(Default)]
struct DbState {
    vars: BTreeMap<VarPath, DbEntry>,
    revision: u64,
    subs: Vec<SubSlot>,
}

struct DbInner {
    state: RwLock<DbState>,
    clock: SimClock,
}

/// Shared handle to the database. Cloning is cheap.
#[derive(Clone)]
pub struct Db {
    inner: Arc<DbInner>,
}

impl Db {
    pub fn new(clock: SimClock) -> Self {
        Self {
            inner: Arc::new(DbInner {
                state: RwLock::new(DbState::default()),
                clock,
            }),
        }
    }

    pub fn clock(&self) -> &SimClock {
        &self.inner.clock
    }

    /// Stores `value` under `path` and returns the new global revision.
    pub fn set_var(&self, path: &VarPath, value: VarValue, writer: &str) -> Result<u64, RtdbError> {
        value.validate()?;
        let mut st = self.inner.state.write().unwrap();
        if let Some(old) = st.vars.get(path) {
            if old.value.tag() != value.tag() {
                return Err(RtdbError::TypeMismatch {
                    path: path.clone(),
                    stored: old.value.tag(),
                    given: value.tag(),
                });
            }
        }
        st.revision += 1;
        let entry = DbEntry {
            path: path.clone(),
            value,
            revision: st.revision,
            wall_time: self.inner.clock.datetime(self.inner.clock.now()),
            writer: writer.to_string(),
        };
        // delivery happens under the write lock so every subscriber sees
        // revision order; dead receivers are dropped here
        st.subs.retain(|s| {
            if s.prefix.as_ref().is_none_or(|pre| path.starts_with(pre)) {
                s.tx.send(entry.clone()).is_ok()
            } else {
                true
            }
        });
        let rev = entry.revision;
        st.vars.insert(path.clone(), entry);
        Ok(rev)
    }

    /// Convenience for call sites holding a literal path.
    pub fn set(
        &self,
        path: &str,
        value: impl Into<VarValue>,
        writer: &str,
    ) -> Result<u64, RtdbError> {
        let path = VarPath::parse(path)?;
        self.set_var(&path, value.into(), writer)
    }

    pub fn get_var(&self, path: &VarPath) -> Result<DbEntry, RtdbError> {
        self.inner
            .state
            .read()
            .unwrap()
            .vars
            .get(path)
            .cloned()
            .ok_or_else(|| RtdbError::NotFound(path.clone()))
    }

    pub fn get(&self, path: &str) -> Option<VarValue> {
        let path = VarPath::parse(path).ok()?;
        self.get_var(&path).ok().map(|e| e.value)
    }

    pub fn get_int(&self, path: &str) -> Option<i64> {
        self.get(path).and_then(|v| v.as_int())
    }

    pub fn get_real(&self, path: &str) -> Option<f64> {
        self.get(path).and_then(|v| v.as_real())
    }

    pub fn get_text(&self, path: &str) -> Option<String> {
        self.get(path).and_then(|v| v.as_text().map(str::to_string))
    }

    /// Sorted paths under `prefix`, or every path when `prefix` is `None`.
    pub fn list_vars(&self, prefix: Option<&VarPath>) -> Vec<VarPath> {
        self.inner
            .state
            .read()
            .unwrap()
            .vars
            .keys()
            .filter(|k| prefix.is_none_or(|pre| k.starts_with(pre)))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.inner.state.read().unwrap().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Last revision handed out.
    pub fn revision(&self) -> u64 {
        self.inner.state.read().unwrap().revision
    }

    /// Change stream for every write at or below `prefix` from now on.
    pub fn subscribe(&self, prefix: Option<&VarPath>) -> Subscription {
        let (tx, rx) = mpsc::channel();
        self.inner.state.write().unwrap().subs.push(SubSlot {
            prefix: prefix.cloned(),
            tx,
        });
        Subscription { rx }
    }

    /// Captures the whole database at a single revision.
    pub fn save_snapshot(&self) -> Snapshot {
        let st = self.inner.state.read().unwrap();
        Snapshot {
            created: self.inner.clock.datetime(self.inner.clock.now()),
            revision: st.revision,
            records: st
                .vars
                .values()
                .map(|e| SnapshotRecord {
                    path: e.path.clone(),
                    value: e.value.clone(),
                    revision: e.revision,
                })
                .collect(),
        }
    }

    /// Replaces the entire content with `snap`. Subscribers are not notified;
    /// the revision counter resumes above the snapshot's revision.
    pub fn restore_snapshot(&self, snap: &Snapshot) -> Result<(), RtdbError> {
        snap.check()?;
        let now = self.inner.clock.datetime(self.inner.clock.now());
        let mut st = self.inner.state.write().unwrap();
        st.vars = snap
            .records
            .iter()
            .map(|r| {
                (
                    r.path.clone(),
                    DbEntry {
                        path: r.path.clone(),
                        value: r.value.clone(),
                        revision: r.revision,
                        wall_time: now,
                        writer: "restore".to_string(),
                    },
                )
            })
            .collect();
        st.revision = snap.revision;
        Ok(())
    }
}

impl std::fmt::Debug for Db {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Db")
            .field("vars", &self.len())
            .field("revision", &self.revision())
            .finish()
    }
}

/// Ordered stream of changes for one subscriber.
pub struct Subscription {
    rx: Receiver<DbEntry>,
}

impl Subscription {
    /// Blocks until the next change.
    pub fn recv(&self) -> Result<DbEntry, RtdbError> {
        self.rx.recv().map_err(|_| RtdbError::StreamClosed)
    }

    /// `Ok(None)` on timeout.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<DbEntry>, RtdbError> {
        match self.rx.recv_timeout(timeout) {
            Ok(e) => Ok(Some(e)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(RtdbError::StreamClosed),
        }
    }

    pub fn try_recv(&self) -> Result<Option<DbEntry>, RtdbError> {
        match self.rx.try_recv() {
            Ok(e) => Ok(Some(e)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(RtdbError::StreamClosed),
        }
    }

    /// Everything queued right now.
    pub fn drain(&self) -> Vec<DbEntry> {
        self.rx.try_iter().collect()
    }
}
