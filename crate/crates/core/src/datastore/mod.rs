//! Durable storage: a versioned JSON catalog and per-run record logs.
//!
//! On-disk layout under the data root:
//!
//! ```text
//! catalog/<kind>/<id>.json
//! runs/<run_id>/<attempt>/records.jsonl
//! runs/<run_id>/<attempt>/index.json
//! runs/<run_id>/<attempt>/COMPLETED
//! ```
//!
//! Each `records.jsonl` line is `<canonical JSON record>\t<crc32 as 8 hex digits>\n`.
//! `index.json` maps every 1000th step to the byte offset of its first line.

mod catalog;
mod log;

use std::io;
use std::path::{Path, PathBuf};

pub use catalog::{Catalog, CatalogEntry, Kind};
pub use log::{RecordStore, StepRange, INDEX_STRIDE};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("unknown {kind} `{id}`")]
    UnknownId { kind: Kind, id: String },
    #[error("{kind} `{id}` already exists")]
    AlreadyExists { kind: Kind, id: String },
    #[error("invalid id `{0}`")]
    InvalidId(String),
    #[error("revision conflict: expected {expected}, current {current}")]
    RevisionConflict { expected: u64, current: u64 },
    #[error("record out of order: {0}")]
    OrderViolation(String),
    #[error("record for run `{found}` appended to log of `{expected}`")]
    RunMismatch { expected: String, found: String },
    #[error("corrupt record log {path} at line {line}")]
    CorruptLog { path: PathBuf, line: u64 },
    #[error("storage full")]
    StorageFull,
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::StorageFull {
            StoreError::StorageFull
        } else {
            StoreError::Io { path: path.to_owned(), source }
        }
    }
}

/// Ids become file names, so they are restricted to a safe alphabet.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.len() <= 200
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Catalog plus record logs under one data root.
#[derive(Debug)]
pub struct Datastore {
    root: PathBuf,
    pub catalog: Catalog,
    pub records: RecordStore,
}

impl Datastore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { catalog: Catalog::open(root.join("catalog"))?, records: RecordStore::open(root.join("runs"))?, root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}
