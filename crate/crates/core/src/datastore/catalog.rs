use std::fmt;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{io_err, valid_id, write_atomic, StoreError};
use crate::canonical;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Scenario,
    Template,
    Batch,
    Run,
    Analysis,
}

impl Kind {
    pub const ALL: [Kind; 5] = [Kind::Scenario, Kind::Template, Kind::Batch, Kind::Run, Kind::Analysis];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Scenario => "scenario",
            Kind::Template => "template",
            Kind::Batch => "batch",
            Kind::Run => "run",
            Kind::Analysis => "analysis",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub kind: Kind,
    pub id: String,
    pub revision: u64,
    pub body: Value,
    /// Milliseconds since the Unix epoch.
    pub created_ms: u64,
    pub updated_ms: u64,
    #[serde(default)]
    pub deleted: bool,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Versioned key-value store, one JSON file per entry.
///
/// Every write bumps the entry's revision; deletes leave a tombstone so
/// revisions are never reused. Writes are serialised by a single lock.
#[derive(Debug)]
pub struct Catalog {
    root: PathBuf,
    lock: Mutex<()>,
}

impl Catalog {
    pub fn open(root: PathBuf) -> Result<Self, StoreError> {
        for kind in Kind::ALL {
            let dir = root.join(kind.as_str());
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(Self { root, lock: Mutex::new(()) })
    }

    fn path(&self, kind: Kind, id: &str) -> Result<PathBuf, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::InvalidId(id.to_owned()));
        }
        Ok(self.root.join(kind.as_str()).join(format!("{id}.json")))
    }

    fn load(&self, kind: Kind, id: &str) -> Result<Option<CatalogEntry>, StoreError> {
        let path = self.path(kind, id)?;
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| StoreError::Io { path, source: std::io::Error::other(e) }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn store(&self, entry: &CatalogEntry) -> Result<(), StoreError> {
        let path = self.path(entry.kind, &entry.id)?;
        write_atomic(&path, canonical::to_string_pretty(entry).as_bytes())
    }

    /// Live entry, tombstones excluded.
    pub fn get(&self, kind: Kind, id: &str) -> Result<CatalogEntry, StoreError> {
        match self.load(kind, id)? {
            Some(e) if !e.deleted => Ok(e),
            _ => Err(StoreError::UnknownId { kind, id: id.to_owned() }),
        }
    }

    /// Entry including tombstones.
    pub fn get_any(&self, kind: Kind, id: &str) -> Result<CatalogEntry, StoreError> {
        self.load(kind, id)?.ok_or_else(|| StoreError::UnknownId { kind, id: id.to_owned() })
    }

    /// Creates a new entry; fails if a live entry with this id exists.
    pub fn create(&self, kind: Kind, id: &str, body: Value) -> Result<CatalogEntry, StoreError> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let prev = self.load(kind, id)?;
        if matches!(&prev, Some(p) if !p.deleted) {
            return Err(StoreError::AlreadyExists { kind, id: id.to_owned() });
        }
        self.write(kind, id, body, prev, false)
    }

    /// Creates or replaces an entry. With `expected`, the write only happens
    /// if the live entry is at exactly that revision.
    pub fn put(&self, kind: Kind, id: &str, body: Value, expected: Option<u64>) -> Result<CatalogEntry, StoreError> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let prev = self.load(kind, id)?;
        check_revision(&prev, expected)?;
        self.write(kind, id, body, prev, false)
    }

    /// Replaces the entry with a tombstone that keeps the last body.
    pub fn delete(&self, kind: Kind, id: &str, expected: Option<u64>) -> Result<CatalogEntry, StoreError> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let prev = self.load(kind, id)?;
        let Some(live) = prev.as_ref().filter(|p| !p.deleted) else {
            return Err(StoreError::UnknownId { kind, id: id.to_owned() });
        };
        check_revision(&prev, expected)?;
        let body = live.body.clone();
        self.write(kind, id, body, prev, true)
    }

    fn write(
        &self,
        kind: Kind,
        id: &str,
        body: Value,
        prev: Option<CatalogEntry>,
        deleted: bool,
    ) -> Result<CatalogEntry, StoreError> {
        let now = now_ms();
        let entry = CatalogEntry {
            kind,
            id: id.to_owned(),
            revision: prev.as_ref().map_or(1, |p| p.revision + 1),
            body,
            created_ms: prev.as_ref().filter(|p| !p.deleted).map_or(now, |p| p.created_ms),
            updated_ms: now,
            deleted,
        };
        self.store(&entry)?;
        Ok(entry)
    }

    /// Live entries of `kind` whose id starts with `prefix`, sorted by id.
    pub fn list(&self, kind: Kind, prefix: &str) -> Result<Vec<CatalogEntry>, StoreError> {
        let dir = self.root.join(kind.as_str());
        let mut ids: Vec<String> = std::fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter_map(|name| name.strip_suffix(".json").map(str::to_owned))
            .filter(|id| id.starts_with(prefix) && valid_id(id))
            .collect();
        ids.sort();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            if let Some(e) = self.load(kind, &id)? {
                if !e.deleted {
                    out.push(e);
                }
            }
        }
        Ok(out)
    }
}

fn check_revision(prev: &Option<CatalogEntry>, expected: Option<u64>) -> Result<(), StoreError> {
    let Some(expected) = expected else { return Ok(()) };
    let current = prev.as_ref().filter(|p| !p.deleted).map_or(0, |p| p.revision);
    if current != expected {
        return Err(StoreError::RevisionConflict { expected, current });
    }
    Ok(())
}
