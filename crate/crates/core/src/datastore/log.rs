use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::hash::{BuildHasher, RandomState};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{io_err, valid_id, write_atomic, StoreError};
use crate::{canonical, StepRecord};

/// Steps between index entries.
pub const INDEX_STRIDE: u64 = 1000;

const RECORDS: &str = "records.jsonl";
const INDEX: &str = "index.json";
const COMPLETED: &str = "COMPLETED";

/// Inclusive step interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRange {
    pub from: u64,
    pub to: u64,
}

impl StepRange {
    pub const ALL: StepRange = StepRange { from: 0, to: u64::MAX };

    pub fn new(from: Option<u64>, to: Option<u64>) -> Self {
        Self { from: from.unwrap_or(0), to: to.unwrap_or(u64::MAX) }
    }
}

pub(crate) fn encode_line(record: &StepRecord) -> Vec<u8> {
    let json = serde_json::to_string(record).expect("records serialize");
    format!("{json}\t{:08x}\n", crc32fast::hash(json.as_bytes())).into_bytes()
}

/// Parses one newline-terminated line; `None` if the checksum or JSON is bad.
pub(crate) fn decode_line(line: &[u8]) -> Option<StepRecord> {
    let line = line.strip_suffix(b"\n")?;
    let tab = line.iter().rposition(|&b| b == b'\t')?;
    let (json, crc) = (&line[..tab], &line[tab + 1..]);
    let crc = u32::from_str_radix(std::str::from_utf8(crc).ok()?, 16).ok()?;
    if crc != crc32fast::hash(json) {
        return None;
    }
    serde_json::from_slice(json).ok()
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct IndexFile {
    stride: u64,
    /// `[first step of block, byte offset]`, ascending.
    entries: Vec<[u64; 2]>,
}

type Key = (u64, String, String);

fn key_of(r: &StepRecord) -> Key {
    (r.step, r.agent_id.clone(), r.tag.clone())
}

/// Writer-side state of one log.
#[derive(Debug)]
struct OpenLog {
    run_id: String,
    dir: PathBuf,
    file: File,
    len: u64,
    last_key: Option<Key>,
    /// 128-bit fingerprints of every persisted key, for idempotent ingest.
    seen: HashSet<u128>,
    hashers: (RandomState, RandomState),
    index: BTreeMap<u64, u64>,
    through: Option<u64>,
}

impl OpenLog {
    fn fingerprint(&self, key: &Key) -> u128 {
        ((self.hashers.0.hash_one(key) as u128) << 64) | self.hashers.1.hash_one(key) as u128
    }

    /// Opens or creates the log, dropping a torn final line left by a crash.
    fn open(run_id: &str, dir: PathBuf) -> Result<Self, StoreError> {
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(RECORDS);
        let file = OpenOptions::new().create(true).read(true).append(true).open(&path).map_err(io_err(&path))?;
        let mut log = OpenLog {
            run_id: run_id.to_owned(),
            dir,
            file,
            len: 0,
            last_key: None,
            seen: HashSet::new(),
            hashers: (RandomState::new(), RandomState::new()),
            index: BTreeMap::new(),
            through: None,
        };
        let mut reader = BufReader::new(File::open(&path).map_err(io_err(&path))?);
        let mut line = Vec::new();
        let mut line_no = 0;
        loop {
            line.clear();
            let n = reader.read_until(b'\n', &mut line).map_err(io_err(&path))?;
            if n == 0 {
                break;
            }
            line_no += 1;
            if line.last() != Some(&b'\n') {
                tracing::warn!(path = %path.display(), offset = log.len, "truncating torn final line");
                log.file.set_len(log.len).map_err(io_err(&path))?;
                break;
            }
            let record = decode_line(&line).ok_or(StoreError::CorruptLog { path: path.clone(), line: line_no })?;
            log.note(&record, log.len);
            log.len += n as u64;
        }
        log.write_index()?;
        Ok(log)
    }

    fn note(&mut self, record: &StepRecord, offset: u64) {
        let key = key_of(record);
        self.seen.insert(self.fingerprint(&key));
        self.index.entry(record.step / INDEX_STRIDE * INDEX_STRIDE).or_insert(offset);
        self.through = Some(record.step);
        self.last_key = Some(key);
    }

    fn write_index(&self) -> Result<(), StoreError> {
        let index = IndexFile { stride: INDEX_STRIDE, entries: self.index.iter().map(|(&s, &o)| [s, o]).collect() };
        write_atomic(&self.dir.join(INDEX), canonical::to_string(&index).as_bytes())
    }

    fn append(&mut self, records: &[StepRecord]) -> Result<Option<u64>, StoreError> {
        let mut fresh = Vec::new();
        let mut prev: Option<Key> = None;
        for r in records {
            if r.run_id != self.run_id {
                return Err(StoreError::RunMismatch { expected: self.run_id.clone(), found: r.run_id.clone() });
            }
            let key = key_of(r);
            if prev.as_ref().is_some_and(|p| *p >= key) {
                return Err(StoreError::OrderViolation(format!("{key:?} follows {prev:?} within a batch")));
            }
            if !self.seen.contains(&self.fingerprint(&key)) {
                if self.last_key.as_ref().is_some_and(|last| *last >= key) {
                    return Err(StoreError::OrderViolation(format!(
                        "{key:?} does not follow persisted {:?}",
                        self.last_key.as_ref().expect("checked")
                    )));
                }
                fresh.push(r);
            }
            prev = Some(key);
        }
        if fresh.is_empty() {
            return Ok(self.through);
        }
        let mut bytes = Vec::new();
        let mut offsets = Vec::with_capacity(fresh.len());
        for r in &fresh {
            offsets.push(self.len + bytes.len() as u64);
            bytes.extend_from_slice(&encode_line(r));
        }
        let path = self.dir.join(RECORDS);
        if let Err(e) = self.file.write_all(&bytes) {
            let _ = self.file.set_len(self.len);
            return Err(io_err(&path)(e));
        }
        self.len += bytes.len() as u64;
        let blocks = self.index.len();
        for (r, off) in fresh.into_iter().zip(offsets) {
            self.note(r, off);
        }
        if self.index.len() != blocks {
            self.write_index()?;
        }
        Ok(self.through)
    }
}

/// Writers kept open, keyed by (run id, attempt).
type OpenLogs = HashMap<(String, u32), Arc<Mutex<OpenLog>>>;

/// Per-run, per-attempt append-only record logs.
#[derive(Debug)]
pub struct RecordStore {
    root: PathBuf,
    open: Mutex<OpenLogs>,
}

impl RecordStore {
    pub fn open(root: PathBuf) -> Result<Self, StoreError> {
        std::fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root, open: Mutex::new(HashMap::new()) })
    }

    fn run_dir(&self, run_id: &str) -> Result<PathBuf, StoreError> {
        if !valid_id(run_id) {
            return Err(StoreError::InvalidId(run_id.to_owned()));
        }
        Ok(self.root.join(run_id))
    }

    fn attempt_dir(&self, run_id: &str, attempt: u32) -> Result<PathBuf, StoreError> {
        Ok(self.run_dir(run_id)?.join(attempt.to_string()))
    }

    fn writer(&self, run_id: &str, attempt: u32) -> Result<Arc<Mutex<OpenLog>>, StoreError> {
        let mut open = self.open.lock().unwrap_or_else(|e| e.into_inner());
        let key = (run_id.to_owned(), attempt);
        if let Some(log) = open.get(&key) {
            return Ok(log.clone());
        }
        let log = Arc::new(Mutex::new(OpenLog::open(run_id, self.attempt_dir(run_id, attempt)?)?));
        open.insert(key, log.clone());
        Ok(log)
    }

    /// Appends a batch sorted by `(step, agent_id, tag)`. Records already in the
    /// log are skipped, so re-sending a batch is harmless. Returns the highest
    /// persisted step.
    pub fn append(&self, run_id: &str, attempt: u32, records: &[StepRecord]) -> Result<Option<u64>, StoreError> {
        let log = self.writer(run_id, attempt)?;
        let mut log = log.lock().unwrap_or_else(|e| e.into_inner());
        log.append(records)
    }

    /// Creates the log for an attempt even if it never receives a record.
    pub fn begin(&self, run_id: &str, attempt: u32) -> Result<Option<u64>, StoreError> {
        let log = self.writer(run_id, attempt)?;
        let through = log.lock().unwrap_or_else(|e| e.into_inner()).through;
        Ok(through)
    }

    /// Releases the writer for an attempt.
    pub fn close(&self, run_id: &str, attempt: u32) {
        self.open.lock().unwrap_or_else(|e| e.into_inner()).remove(&(run_id.to_owned(), attempt));
    }

    /// Marks an attempt as the run's completed execution and closes it.
    pub fn mark_completed(&self, run_id: &str, attempt: u32) -> Result<(), StoreError> {
        self.close(run_id, attempt);
        let dir = self.attempt_dir(run_id, attempt)?;
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let marker = dir.join(COMPLETED);
        std::fs::write(&marker, b"").map_err(io_err(&marker))
    }

    /// Moves a corrupt log aside so it is never read or appended again.
    pub fn quarantine(&self, run_id: &str, attempt: u32) -> Result<PathBuf, StoreError> {
        self.close(run_id, attempt);
        let dir = self.attempt_dir(run_id, attempt)?;
        let to = dir.join(format!("{RECORDS}.corrupt"));
        std::fs::rename(dir.join(RECORDS), &to).map_err(io_err(&to))?;
        let _ = std::fs::remove_file(dir.join(INDEX));
        Ok(to)
    }

    /// Attempt numbers with a directory on disk, ascending.
    pub fn attempts(&self, run_id: &str) -> Result<Vec<u32>, StoreError> {
        let dir = self.run_dir(run_id)?;
        let entries = match std::fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&dir)(e)),
        };
        let mut out: Vec<u32> = entries.filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok()).collect();
        out.sort_unstable();
        Ok(out)
    }

    pub fn is_completed(&self, run_id: &str, attempt: u32) -> bool {
        self.attempt_dir(run_id, attempt).is_ok_and(|d| d.join(COMPLETED).exists())
    }

    /// The completed attempt if there is one, otherwise the latest.
    pub fn default_attempt(&self, run_id: &str) -> Result<Option<u32>, StoreError> {
        let attempts = self.attempts(run_id)?;
        let completed = attempts.iter().rev().find(|&&a| self.is_completed(run_id, a));
        Ok(completed.or(attempts.last()).copied())
    }

    /// The slice of an attempt's log with steps in `range`, optionally only
    /// records carrying `tag`, in log order.
    pub fn read(
        &self,
        run_id: &str,
        attempt: Option<u32>,
        range: StepRange,
        tag: Option<&str>,
    ) -> Result<Vec<StepRecord>, StoreError> {
        let mut out = Vec::new();
        self.scan(run_id, attempt, range, |r| {
            if tag.is_none_or(|t| r.tag == t) {
                out.push(r);
            }
        })?;
        Ok(out)
    }

    /// Streams the slice to `visit` without collecting it.
    pub fn scan(
        &self,
        run_id: &str,
        attempt: Option<u32>,
        range: StepRange,
        mut visit: impl FnMut(StepRecord),
    ) -> Result<(), StoreError> {
        let attempt = match attempt {
            Some(a) => a,
            None => self.default_attempt(run_id)?.ok_or_else(|| StoreError::UnknownRun(run_id.to_owned()))?,
        };
        let dir = self.attempt_dir(run_id, attempt)?;
        if !dir.is_dir() {
            return Err(StoreError::UnknownRun(format!("{run_id}/{attempt}")));
        }
        if range.from > range.to {
            return Ok(());
        }
        let path = dir.join(RECORDS);
        let mut file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let size = file.metadata().map_err(io_err(&path))?.len();
        let start = seek_offset(&dir, range.from).filter(|&o| o <= size).unwrap_or(0);
        file.seek(SeekFrom::Start(start)).map_err(io_err(&path))?;
        let mut reader = BufReader::with_capacity(1 << 16, file);
        let mut line = Vec::new();
        let mut line_no = 0;
        loop {
            line.clear();
            let n = reader.read_until(b'\n', &mut line).map_err(io_err(&path))?;
            if n == 0 || line.last() != Some(&b'\n') {
                return Ok(());
            }
            line_no += 1;
            let record = decode_line(&line).ok_or(StoreError::CorruptLog { path: path.clone(), line: line_no })?;
            if record.step > range.to {
                return Ok(());
            }
            if record.step >= range.from {
                visit(record);
            }
        }
    }

    /// Highest step on disk for an attempt.
    pub fn through_step(&self, run_id: &str, attempt: u32) -> Result<Option<u64>, StoreError> {
        if let Some(log) = self.open.lock().unwrap_or_else(|e| e.into_inner()).get(&(run_id.to_owned(), attempt)) {
            return Ok(log.lock().unwrap_or_else(|e| e.into_inner()).through);
        }
        let mut last = None;
        self.scan(run_id, Some(attempt), StepRange::ALL, |r| last = Some(r.step))?;
        Ok(last)
    }
}

fn seek_offset(dir: &Path, from: u64) -> Option<u64> {
    let index: IndexFile = serde_json::from_slice(&std::fs::read(dir.join(INDEX)).ok()?).ok()?;
    index.entries.iter().take_while(|[step, _]| *step <= from).last().map(|[_, off]| *off)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::record::Scalar;

    fn rec(run: &str, step: u64, agent: &str, tag: &str) -> StepRecord {
        StepRecord {
            run_id: run.into(),
            step,
            sim_time: step as f64 * 0.1,
            tag: tag.into(),
            agent_id: agent.into(),
            payload: [("x".to_owned(), Scalar::Number(step as f64))].into(),
        }
    }

    fn steps(run: &str, range: std::ops::Range<u64>) -> Vec<StepRecord> {
        range.flat_map(|s| [rec(run, s, "a", "status"), rec(run, s, "b", "status")]).collect()
    }

    fn store() -> (tempfile::TempDir, RecordStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = RecordStore::open(dir.path().join("runs")).unwrap();
        (dir, s)
    }

    #[test]
    fn line_format() {
        let line = encode_line(&rec("r", 3, "a", "hit"));
        let text = String::from_utf8(line.clone()).unwrap();
        let (json, crc) = text.trim_end().rsplit_once('\t').unwrap();
        assert_eq!(crc.len(), 8);
        assert_eq!(u32::from_str_radix(crc, 16).unwrap(), crc32fast::hash(json.as_bytes()));
        assert!(json.starts_with(r#"{"agent_id":"a","payload":{"x":3.0},"run_id":"r","sim_time":"#));
        assert_eq!(decode_line(&line), Some(rec("r", 3, "a", "hit")));
        let mut bad = line.clone();
        bad[5] ^= 1;
        assert_eq!(decode_line(&bad), None);
    }

    #[test]
    fn append_twice_is_idempotent() {
        let (dir, s) = store();
        let batch = steps("r", 0..10);
        assert_eq!(s.append("r", 1, &batch).unwrap(), Some(9));
        let path = dir.path().join("runs/r/1/records.jsonl");
        let before = std::fs::read(&path).unwrap();
        assert_eq!(s.append("r", 1, &batch).unwrap(), Some(9));
        assert_eq!(std::fs::read(&path).unwrap(), before);
        assert_eq!(s.read("r", None, StepRange::ALL, None).unwrap(), batch);
    }

    #[test]
    fn overlapping_retransmit_keeps_new_tail() {
        let (_d, s) = store();
        s.append("r", 1, &steps("r", 0..10)).unwrap();
        assert_eq!(s.append("r", 1, &steps("r", 5..15)).unwrap(), Some(14));
        assert_eq!(s.read("r", Some(1), StepRange::ALL, None).unwrap(), steps("r", 0..15));
    }

    #[test]
    fn order_violations() {
        let (_d, s) = store();
        s.append("r", 1, &steps("r", 5..10)).unwrap();
        assert!(matches!(s.append("r", 1, &[rec("r", 3, "a", "x")]), Err(StoreError::OrderViolation(_))));
        let unsorted = [rec("r", 11, "b", "x"), rec("r", 11, "a", "x")];
        assert!(matches!(s.append("r", 1, &unsorted), Err(StoreError::OrderViolation(_))));
        assert!(matches!(s.append("r", 1, &[rec("q", 12, "a", "x")]), Err(StoreError::RunMismatch { .. })));
        assert_eq!(s.read("r", None, StepRange::ALL, None).unwrap().len(), 10);
    }

    #[test]
    fn slices_and_filters() {
        let (_d, s) = store();
        let mut all = Vec::new();
        for chunk in (0..3500).collect::<Vec<u64>>().chunks(50) {
            let mut batch = Vec::new();
            for &st in chunk {
                batch.push(rec("r", st, "a", "status"));
                if st % 700 == 0 {
                    batch.push(rec("r", st, "a", "zz"));
                }
            }
            s.append("r", 1, &batch).unwrap();
            all.extend(batch);
        }
        let k = s.read("r", None, StepRange { from: 2100, to: 2100 }, None).unwrap();
        assert_eq!(k, vec![rec("r", 2100, "a", "status"), rec("r", 2100, "a", "zz")]);
        let window = s.read("r", None, StepRange { from: 999, to: 1001 }, None).unwrap();
        assert_eq!(window.iter().map(|r| r.step).collect::<Vec<_>>(), [999, 1000, 1001]);
        let tagged = s.read("r", None, StepRange::ALL, Some("zz")).unwrap();
        assert_eq!(tagged.iter().map(|r| r.step).collect::<Vec<_>>(), [0, 700, 1400, 2100, 2800]);
        assert!(s.read("r", None, StepRange { from: 9000, to: 9999 }, None).unwrap().is_empty());
        assert_eq!(s.read("r", None, StepRange::ALL, None).unwrap(), all);
        let index = std::fs::read_to_string(s.root.join("r/1/index.json")).unwrap();
        let parsed: IndexFile = serde_json::from_str(&index).unwrap();
        assert_eq!(parsed.entries.iter().map(|e| e[0]).collect::<Vec<_>>(), [0, 1000, 2000, 3000]);
    }

    #[test]
    fn torn_tail_is_dropped_on_reopen() {
        let (dir, s) = store();
        s.append("r", 1, &steps("r", 0..5)).unwrap();
        drop(s);
        let path = dir.path().join("runs/r/1/records.jsonl");
        let mut bytes = std::fs::read(&path).unwrap();
        let whole = bytes.len();
        bytes.extend_from_slice(&encode_line(&rec("r", 5, "a", "status"))[..20]);
        std::fs::write(&path, &bytes).unwrap();

        let s = RecordStore::open(dir.path().join("runs")).unwrap();
        assert_eq!(s.read("r", None, StepRange::ALL, None).unwrap(), steps("r", 0..5));
        assert_eq!(s.append("r", 1, &steps("r", 5..6)).unwrap(), Some(5));
        assert_eq!(std::fs::read(&path).unwrap().len(), whole + encode_line(&rec("r", 5, "a", "status")).len() * 2);
        assert_eq!(s.read("r", None, StepRange::ALL, None).unwrap(), steps("r", 0..6));
    }

    #[test]
    fn corrupt_line_is_detected_and_quarantined() {
        let (dir, s) = store();
        s.append("r", 1, &steps("r", 0..5)).unwrap();
        s.close("r", 1);
        let path = dir.path().join("runs/r/1/records.jsonl");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[30] = b'#';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(s.read("r", None, StepRange::ALL, None), Err(StoreError::CorruptLog { line: 1, .. })));
        assert!(matches!(s.append("r", 1, &steps("r", 5..6)), Err(StoreError::CorruptLog { .. })));
        let moved = s.quarantine("r", 1).unwrap();
        assert!(moved.exists());
        assert!(s.read("r", Some(1), StepRange::ALL, None).unwrap().is_empty());
    }

    #[test]
    fn default_attempt_prefers_completed() {
        let (_d, s) = store();
        assert!(matches!(s.read("r", None, StepRange::ALL, None), Err(StoreError::UnknownRun(_))));
        s.append("r", 1, &steps("r", 0..3)).unwrap();
        s.append("r", 2, &steps("r", 0..2)).unwrap();
        s.mark_completed("r", 1).unwrap();
        s.append("r", 3, &steps("r", 0..1)).unwrap();
        assert_eq!(s.attempts("r").unwrap(), [1, 2, 3]);
        assert_eq!(s.default_attempt("r").unwrap(), Some(1));
        assert_eq!(s.read("r", None, StepRange::ALL, None).unwrap().len(), 6);
        assert_eq!(s.through_step("r", 2).unwrap(), Some(1));
    }
}
