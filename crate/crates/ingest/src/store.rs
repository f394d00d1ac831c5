//! Append-only segment store.
//!
//! Layout: `<root>/MANIFEST` and `<root>/<stream>/segment-<n>.log`. A
//! segment is an 8-byte magic header followed by records
//! `[body len: u32 LE][crc32(body): u32 LE][body]`. Body:
//! `seq u64 | ingest_ts i64 | has_source u8 [| source_ts i64] | n u8 |
//! n x (name_len u8 | name | f64 bits)`, all little-endian.
//!
//! A store is opened either as the single writer (recovers and truncates
//! torn tails) or read-only (tails the files written by another process).

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::schema::{StreamId, TelemetrySample};

pub const SEGMENT_MAGIC: &[u8; 8] = b"PPSEG\x00\x00\x01";
pub const DEFAULT_SEGMENT_BYTES: u64 = 64 * 1024 * 1024;
pub const MAX_LIMIT: usize = 10_000;
/// Live events buffered per subscriber before it counts as lagging.
pub const LIVE_CAPACITY: usize = 1000;
const RECORD_HEADER: usize = 8;
const MAX_BODY: usize = 4096;
const MANIFEST: &str = "MANIFEST";
const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone)]
pub struct StoreOptions {
    pub segment_bytes: u64,
    pub read_only: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions { segment_bytes: DEFAULT_SEGMENT_BYTES, read_only: false }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage full")]
    StorageFull,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("store is read-only")]
    ReadOnly,
    #[error("writes disabled after earlier failure: {0}")]
    Unavailable(String),
    #[error("invalid sample: {0}")]
    Invalid(String),
    #[error("corrupt record at {path}:{offset}")]
    Corrupt { path: PathBuf, offset: u64 },
    #[error("unsupported store format: {0}")]
    Format(String),
}

fn io_err(e: io::Error) -> StoreError {
    if e.raw_os_error() == Some(28) {
        StoreError::StorageFull
    } else {
        StoreError::Io(e)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueryError {
    #[error("from {from} is after to {to}")]
    InvalidRange { from: i64, to: i64 },
    #[error("limit {0} outside 1..=10000")]
    InvalidLimit(usize),
    #[error("{0}")]
    Read(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    #[default]
    Asc,
    Desc,
}

impl std::str::FromStr for Order {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "asc" => Ok(Order::Asc),
            "desc" => Ok(Order::Desc),
            other => Err(format!("order must be asc or desc, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Page {
    pub samples: Vec<TelemetrySample>,
    /// Seq of the last returned sample when more remain.
    pub next_cursor: Option<u64>,
    /// Samples in the whole range, ignoring cursor and limit.
    pub total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryStats {
    pub samples: BTreeMap<StreamId, u64>,
    pub truncated_bytes: u64,
    pub quarantined: Vec<PathBuf>,
}

/// Simulated crash for durability tests. Once triggered every later
/// append fails as if the process had died.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillPoint {
    BeforeWrite,
    /// Only the first `keep` bytes of the record reach the file.
    TornWrite { keep: usize },
    /// The full record is written but never synced or acknowledged.
    BeforeSync,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    seq: u64,
    ts: i64,
    segment: u32,
    offset: u64,
    len: u32,
}

#[derive(Default)]
struct Index {
    entries: Vec<Entry>,
    files: BTreeMap<u32, Arc<File>>,
}

#[derive(Default)]
struct Tail {
    /// Active (writer) or currently tailed (reader) segment; 0 when none.
    segment: u32,
    len: u64,
    last_seq: u64,
    last_ts: i64,
}

#[derive(Default)]
struct StreamState {
    index: RwLock<Index>,
    tail: Mutex<Tail>,
}

pub struct Store {
    root: PathBuf,
    opts: StoreOptions,
    streams: [StreamState; 3],
    live: broadcast::Sender<TelemetrySample>,
    failure: Mutex<Option<String>>,
    kill: Mutex<Option<(u64, KillPoint)>>,
    stats: RecoveryStats,
}

fn slot(stream: StreamId) -> usize {
    match stream {
        StreamId::Esp32Energy => 0,
        StreamId::IndustrialEnergy => 1,
        StreamId::Environment => 2,
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn segment_path(root: &Path, stream: StreamId, id: u32) -> PathBuf {
    root.join(stream.as_str()).join(format!("segment-{id}.log"))
}

fn list_segments(dir: &Path) -> io::Result<Vec<u32>> {
    let mut ids = Vec::new();
    let rd = match fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(ids),
        Err(e) => return Err(e),
    };
    for entry in rd {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_prefix("segment-").and_then(|r| r.strip_suffix(".log")) {
            if let Ok(id) = id.parse() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

pub fn encode_record(sample: &TelemetrySample) -> Vec<u8> {
    let mut body = Vec::with_capacity(64);
    body.extend_from_slice(&sample.seq.to_le_bytes());
    body.extend_from_slice(&sample.ingest_ts.to_le_bytes());
    match sample.source_ts {
        Some(ts) => {
            body.push(1);
            body.extend_from_slice(&ts.to_le_bytes());
        }
        None => body.push(0),
    }
    body.push(sample.fields.len() as u8);
    for (name, v) in &sample.fields {
        body.push(name.len() as u8);
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    let mut rec = Vec::with_capacity(RECORD_HEADER + body.len());
    rec.extend_from_slice(&(body.len() as u32).to_le_bytes());
    rec.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    rec.extend_from_slice(&body);
    rec
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.0.len() < n {
            return None;
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Some(head)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn decode_body(stream: StreamId, body: &[u8]) -> Option<TelemetrySample> {
    let mut c = Cursor(body);
    let seq = c.u64()?;
    let ingest_ts = c.u64()? as i64;
    let source_ts = match c.u8()? {
        0 => None,
        1 => Some(c.u64()? as i64),
        _ => return None,
    };
    let n = c.u8()?;
    let mut fields = Vec::with_capacity(usize::from(n));
    for _ in 0..n {
        let len = c.u8()?;
        let name = std::str::from_utf8(c.take(usize::from(len))?).ok()?.to_owned();
        fields.push((name, f64::from_bits(c.u64()?)));
    }
    if !c.0.is_empty() {
        return None;
    }
    let sample = TelemetrySample { stream, seq, ingest_ts, source_ts, fields };
    sample.validate().ok()?;
    Some(sample)
}

/// Decodes and verifies one record occupying exactly `rec`.
fn decode_record(stream: StreamId, rec: &[u8]) -> Option<TelemetrySample> {
    let len = u32::from_le_bytes(rec.get(..4)?.try_into().ok()?) as usize;
    let crc = u32::from_le_bytes(rec.get(4..8)?.try_into().ok()?);
    let body = rec.get(RECORD_HEADER..)?;
    if body.len() != len || crc32fast::hash(body) != crc {
        return None;
    }
    decode_body(stream, body)
}

struct Scan {
    records: Vec<(Entry, TelemetrySample)>,
    /// File offset just past the last valid record.
    good_end: u64,
    error: Option<String>,
}

/// Scans `buf`, which holds file contents starting at `base`. Records must
/// continue the `(seq, ts)` ordering in `prev`.
fn scan(stream: StreamId, segment: u32, buf: &[u8], base: u64, mut prev: (u64, i64)) -> Scan {
    let mut out = Scan { records: Vec::new(), good_end: base, error: None };
    let mut pos = 0usize;
    if base == 0 {
        if buf.len() < SEGMENT_MAGIC.len() || &buf[..SEGMENT_MAGIC.len()] != SEGMENT_MAGIC {
            out.error = Some("bad segment header".into());
            return out;
        }
        pos = SEGMENT_MAGIC.len();
        out.good_end = pos as u64;
    }
    while pos < buf.len() {
        let rest = &buf[pos..];
        if rest.len() < RECORD_HEADER {
            out.error = Some("truncated record header".into());
            break;
        }
        let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        if len > MAX_BODY {
            out.error = Some(format!("record length {len} out of range"));
            break;
        }
        if rest.len() < RECORD_HEADER + len {
            out.error = Some("truncated record body".into());
            break;
        }
        let rec = &rest[..RECORD_HEADER + len];
        let Some(sample) = decode_record(stream, rec) else {
            out.error = Some("checksum or encoding mismatch".into());
            break;
        };
        if sample.seq <= prev.0 || sample.ingest_ts < prev.1 {
            out.error = Some(format!("seq {} breaks ordering after {}", sample.seq, prev.0));
            break;
        }
        prev = (sample.seq, sample.ingest_ts);
        let offset = base + pos as u64;
        out.records.push((
            Entry { seq: sample.seq, ts: sample.ingest_ts, segment, offset, len: rec.len() as u32 },
            sample,
        ));
        pos += rec.len();
        out.good_end = base + pos as u64;
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    streams: Vec<StreamId>,
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

fn open_segment(path: &Path, writable: bool) -> io::Result<File> {
    OpenOptions::new().read(true).append(writable).open(path)
}

impl Store {
    /// Opens (creating if needed) and recovers a store as its single writer.
    pub fn open(root: impl Into<PathBuf>) -> Result<Store, StoreError> {
        Store::open_with(root, StoreOptions::default())
    }

    pub fn open_with(root: impl Into<PathBuf>, opts: StoreOptions) -> Result<Store, StoreError> {
        let root = root.into();
        if opts.read_only {
            check_manifest(&root)?;
        } else {
            fs::create_dir_all(&root)?;
            write_manifest(&root)?;
        }
        let (live, _) = broadcast::channel(LIVE_CAPACITY);
        let mut store = Store {
            root,
            opts,
            streams: Default::default(),
            live,
            failure: Mutex::new(None),
            kill: Mutex::new(None),
            stats: RecoveryStats::default(),
        };
        if store.opts.read_only {
            store.refresh()?;
        } else {
            for stream in StreamId::ALL {
                store.recover_stream(stream)?;
            }
        }
        for stream in StreamId::ALL {
            let n = store.count(stream) as u64;
            if n > 0 {
                store.stats.samples.insert(stream, n);
            }
        }
        info!(
            "store_opened - root={} read_only={} samples={:?} truncated={} quarantined={}",
            store.root.display(),
            store.opts.read_only,
            store.stats.samples,
            store.stats.truncated_bytes,
            store.stats.quarantined.len()
        );
        Ok(store)
    }

    /// Opens a read-only view that follows another process's writes via
    /// [`Store::refresh`].
    pub fn open_reader(root: impl Into<PathBuf>) -> Result<Store, StoreError> {
        Store::open_with(root, StoreOptions { read_only: true, ..StoreOptions::default() })
    }

    fn recover_stream(&mut self, stream: StreamId) -> Result<(), StoreError> {
        let dir = self.root.join(stream.as_str());
        let ids = list_segments(&dir)?;
        let mut index = Index::default();
        let mut tail = Tail::default();
        for (i, &id) in ids.iter().enumerate() {
            let path = segment_path(&self.root, stream, id);
            let buf = fs::read(&path)?;
            let is_last = i + 1 == ids.len();
            let scanned = scan(stream, id, &buf, 0, (tail.last_seq, tail.last_ts));
            if let Some(err) = &scanned.error {
                let torn_header = buf.len() < SEGMENT_MAGIC.len() && SEGMENT_MAGIC.starts_with(&buf);
                if is_last && (scanned.good_end > 0 || torn_header) {
                    warn!("torn_tail - {} at {}: {err}", path.display(), scanned.good_end);
                    let f = OpenOptions::new().write(true).open(&path)?;
                    f.set_len(scanned.good_end)?;
                    if scanned.good_end == 0 {
                        f.write_all_at(SEGMENT_MAGIC, 0)?;
                    }
                    f.sync_all()?;
                    self.stats.truncated_bytes += buf.len() as u64 - scanned.good_end;
                } else {
                    let target = path.with_extension("log.quarantined");
                    warn!("segment_quarantined - {}: {err}", path.display());
                    fs::rename(&path, &target)?;
                    sync_dir(&dir)?;
                    self.stats.quarantined.push(target);
                    continue;
                }
            }
            let good_end = scanned.good_end.max(SEGMENT_MAGIC.len() as u64);
            for (entry, _) in scanned.records {
                index.entries.push(entry);
            }
            if let Some(last) = index.entries.last() {
                tail.last_seq = last.seq;
                tail.last_ts = last.ts;
            }
            index.files.insert(id, Arc::new(open_segment(&path, is_last)?));
            if is_last {
                tail.segment = id;
                tail.len = good_end;
            }
        }
        if tail.segment == 0 {
            // Last segment was quarantined; the next append starts a fresh one.
            tail.len = 0;
            if let Some(&max) = ids.last() {
                tail.segment = max;
                tail.len = u64::MAX;
            }
        }
        let state = &mut self.streams[slot(stream)];
        *state.index.get_mut().unwrap_or_else(|e| e.into_inner()) = index;
        *state.tail.get_mut().unwrap_or_else(|e| e.into_inner()) = tail;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_read_only(&self) -> bool {
        self.opts.read_only
    }

    pub fn recovery_stats(&self) -> &RecoveryStats {
        &self.stats
    }

    /// `None` while writes are healthy.
    pub fn failure(&self) -> Option<String> {
        lock(&self.failure).clone()
    }

    /// Arms a simulated crash at the append that would receive `seq`.
    #[doc(hidden)]
    pub fn inject_kill(&self, seq: u64, point: KillPoint) {
        *lock(&self.kill) = Some((seq, point));
    }

    pub fn subscribe(&self) -> broadcast::Receiver<TelemetrySample> {
        self.live.subscribe()
    }

    pub fn append(&self, sample: TelemetrySample) -> Result<u64, StoreError> {
        self.append_sample(sample).map(|s| s.seq)
    }

    /// Assigns seq and a non-decreasing ingest timestamp, writes, syncs
    /// and publishes the sample. Returns the stored form.
    pub fn append_sample(&self, mut sample: TelemetrySample) -> Result<TelemetrySample, StoreError> {
        if self.opts.read_only {
            return Err(StoreError::ReadOnly);
        }
        if let Some(reason) = self.failure() {
            return Err(StoreError::Unavailable(reason));
        }
        sample.validate().map_err(|e| StoreError::Invalid(e.to_string()))?;
        let stream = sample.stream;
        let state = &self.streams[slot(stream)];
        let mut tail = lock(&state.tail);
        sample.seq = tail.last_seq + 1;
        sample.ingest_ts = sample.ingest_ts.max(tail.last_ts);
        let rec = encode_record(&sample);

        if tail.segment == 0 || tail.len.saturating_add(rec.len() as u64) > self.opts.segment_bytes {
            self.roll(stream, state, &mut tail).map_err(|e| self.fail(io_err(e)))?;
        }
        let file = state.index.read().unwrap_or_else(|e| e.into_inner()).files[&tail.segment].clone();
        let kill = {
            let mut k = lock(&self.kill);
            match *k {
                Some((seq, point)) if seq == sample.seq => {
                    *k = None;
                    Some(point)
                }
                _ => None,
            }
        };
        if let Some(point) = kill {
            match point {
                KillPoint::BeforeWrite => {}
                KillPoint::TornWrite { keep } => {
                    let _ = (&*file).write_all(&rec[..keep.min(rec.len() - 1)]);
                }
                KillPoint::BeforeSync => {
                    let _ = (&*file).write_all(&rec);
                }
            }
            *lock(&self.failure) = Some(format!("killed at seq {} ({point:?})", sample.seq));
            return Err(StoreError::Unavailable("simulated crash".into()));
        }
        if let Err(e) = (&*file).write_all(&rec).and_then(|_| file.sync_data()) {
            // Best effort: drop the partial record so a reopen sees a clean tail.
            let _ = file.set_len(tail.len);
            return Err(self.fail(io_err(e)));
        }
        let entry = Entry { seq: sample.seq, ts: sample.ingest_ts, segment: tail.segment, offset: tail.len, len: rec.len() as u32 };
        tail.len += rec.len() as u64;
        tail.last_seq = sample.seq;
        tail.last_ts = sample.ingest_ts;
        state.index.write().unwrap_or_else(|e| e.into_inner()).entries.push(entry);
        drop(tail);
        let _ = self.live.send(sample.clone());
        Ok(sample)
    }

    fn fail(&self, err: StoreError) -> StoreError {
        warn!("store_degraded - {err}");
        *lock(&self.failure) = Some(err.to_string());
        err
    }

    fn roll(&self, stream: StreamId, state: &StreamState, tail: &mut Tail) -> io::Result<()> {
        let dir = self.root.join(stream.as_str());
        fs::create_dir_all(&dir)?;
        let id = tail.segment + 1;
        let path = segment_path(&self.root, stream, id);
        let file = OpenOptions::new().read(true).append(true).create_new(true).open(&path)?;
        (&file).write_all(SEGMENT_MAGIC)?;
        file.sync_all()?;
        sync_dir(&dir)?;
        state.index.write().unwrap_or_else(|e| e.into_inner()).files.insert(id, Arc::new(file));
        tail.segment = id;
        tail.len = SEGMENT_MAGIC.len() as u64;
        Ok(())
    }

    /// Picks up records appended by another process. Returns how many new
    /// samples were indexed; each is also published to live subscribers.
    /// A no-op for the writer.
    pub fn refresh(&self) -> Result<usize, StoreError> {
        if !self.opts.read_only {
            return Ok(0);
        }
        let mut added = 0;
        for stream in StreamId::ALL {
            added += self.refresh_stream(stream)?;
        }
        Ok(added)
    }

    fn refresh_stream(&self, stream: StreamId) -> Result<usize, StoreError> {
        let state = &self.streams[slot(stream)];
        let mut tail = lock(&state.tail);
        let ids = list_segments(&self.root.join(stream.as_str()))?;
        let mut fresh = Vec::new();
        let mut new_files = Vec::new();
        let first = tail.segment;
        for (i, &id) in ids.iter().enumerate().filter(|&(_, &id)| id >= first) {
            let path = segment_path(&self.root, stream, id);
            let file = match open_segment(&path, false) {
                Ok(f) => f,
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            };
            let base = if id == tail.segment { tail.len } else { 0 };
            let size = file.metadata()?.len();
            let mut buf = vec![0u8; size.saturating_sub(base) as usize];
            let n = read_up_to(&file, &mut buf, base)?;
            buf.truncate(n);
            let scanned = scan(stream, id, &buf, base, (tail.last_seq, tail.last_ts));
            let is_last = i + 1 == ids.len();
            if let (Some(err), false) = (&scanned.error, is_last) {
                warn!("segment_skipped - {}: {err}", path.display());
            }
            if scanned.good_end == 0 {
                // Header not yet written.
                break;
            }
            if let Some((last, _)) = scanned.records.last() {
                tail.last_seq = last.seq;
                tail.last_ts = last.ts;
            }
            tail.segment = id;
            tail.len = scanned.good_end;
            new_files.push((id, Arc::new(file)));
            fresh.extend(scanned.records);
        }
        drop(tail);
        if fresh.is_empty() && new_files.is_empty() {
            return Ok(0);
        }
        {
            let mut index = state.index.write().unwrap_or_else(|e| e.into_inner());
            for (id, f) in new_files {
                index.files.entry(id).or_insert(f);
            }
            index.entries.extend(fresh.iter().map(|(e, _)| *e));
        }
        let added = fresh.len();
        for (_, sample) in fresh {
            let _ = self.live.send(sample);
        }
        Ok(added)
    }

    pub fn count(&self, stream: StreamId) -> usize {
        self.streams[slot(stream)].index.read().unwrap_or_else(|e| e.into_inner()).entries.len()
    }

    fn read_entries(&self, stream: StreamId, entries: &[Entry]) -> Result<Vec<TelemetrySample>, StoreError> {
        let files: BTreeMap<u32, Arc<File>> = {
            let index = self.streams[slot(stream)].index.read().unwrap_or_else(|e| e.into_inner());
            entries.iter().map(|e| (e.segment, index.files[&e.segment].clone())).collect()
        };
        entries
            .iter()
            .map(|e| {
                let mut buf = vec![0u8; e.len as usize];
                files[&e.segment].read_exact_at(&mut buf, e.offset)?;
                decode_record(stream, &buf).ok_or_else(|| StoreError::Corrupt {
                    path: segment_path(&self.root, stream, e.segment),
                    offset: e.offset,
                })
            })
            .collect()
    }

    pub fn latest(&self, stream: StreamId) -> Result<Option<TelemetrySample>, StoreError> {
        let last = self.streams[slot(stream)].index.read().unwrap_or_else(|e| e.into_inner()).entries.last().copied();
        match last {
            Some(e) => Ok(self.read_entries(stream, &[e])?.pop()),
            None => Ok(None),
        }
    }

    /// Samples with `from <= ingest_ts <= to` in `order`, resuming after
    /// `cursor` (a seq from a previous page).
    pub fn query_range(
        &self,
        stream: StreamId,
        from: i64,
        to: i64,
        limit: usize,
        order: Order,
        cursor: Option<u64>,
    ) -> Result<Page, QueryError> {
        if from > to {
            return Err(QueryError::InvalidRange { from, to });
        }
        if limit == 0 || limit > MAX_LIMIT {
            return Err(QueryError::InvalidLimit(limit));
        }
        let (picked, total, more) = {
            let index = self.streams[slot(stream)].index.read().unwrap_or_else(|e| e.into_inner());
            let all = &index.entries;
            let lo = all.partition_point(|e| e.ts < from);
            let hi = all.partition_point(|e| e.ts <= to);
            let range = &all[lo..hi.max(lo)];
            let total = range.len();
            let picked: Vec<Entry>;
            let more;
            match order {
                Order::Asc => {
                    let start = cursor.map_or(0, |c| range.partition_point(|e| e.seq <= c));
                    let end = (start + limit).min(range.len());
                    picked = range[start..end].to_vec();
                    more = end < range.len();
                }
                Order::Desc => {
                    let end = cursor.map_or(range.len(), |c| range.partition_point(|e| e.seq < c));
                    let start = end.saturating_sub(limit);
                    picked = range[start..end].iter().rev().copied().collect();
                    more = start > 0;
                }
            }
            (picked, total, more)
        };
        let samples = self.read_entries(stream, &picked).map_err(|e| QueryError::Read(e.to_string()))?;
        let next_cursor = if more { samples.last().map(|s| s.seq) } else { None };
        Ok(Page { samples, next_cursor, total })
    }

    /// Flushes every active segment.
    pub fn sync(&self) -> Result<(), StoreError> {
        for state in &self.streams {
            let tail = lock(&state.tail);
            if let Some(f) = state.index.read().unwrap_or_else(|e| e.into_inner()).files.get(&tail.segment) {
                f.sync_all()?;
            }
        }
        Ok(())
    }
}

fn read_up_to(file: &File, buf: &mut [u8], offset: u64) -> io::Result<usize> {
    let mut done = 0;
    while done < buf.len() {
        match file.read_at(&mut buf[done..], offset + done as u64)? {
            0 => break,
            n => done += n,
        }
    }
    Ok(done)
}

fn write_manifest(root: &Path) -> Result<(), StoreError> {
    let path = root.join(MANIFEST);
    if path.exists() {
        return check_manifest(root);
    }
    let body = serde_json::to_vec_pretty(&Manifest { format: MANIFEST_FORMAT, streams: StreamId::ALL.to_vec() })
        .expect("manifest serializes");
    let tmp = root.join("MANIFEST.tmp");
    let mut f = File::create(&tmp)?;
    f.write_all(&body)?;
    f.sync_all()?;
    fs::rename(&tmp, &path)?;
    sync_dir(root)?;
    Ok(())
}

fn check_manifest(root: &Path) -> Result<(), StoreError> {
    let path = root.join(MANIFEST);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        // A reader may start before the writer has created the store.
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| StoreError::Format(e.to_string()))?;
    if m.format != MANIFEST_FORMAT {
        return Err(StoreError::Format(format!("format {} (expected {MANIFEST_FORMAT})", m.format)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(stream: StreamId, ts: i64, v: f64) -> TelemetrySample {
        let fields = stream.field_names().map(|n| (n.to_owned(), v)).collect();
        TelemetrySample { stream, seq: 0, ingest_ts: ts, source_ts: None, fields }
    }

    #[test]
    fn record_round_trip() {
        let mut s = sample(StreamId::Esp32Energy, 1_626_020_645_000, 14.8073);
        s.seq = 7;
        s.source_ts = Some(-3);
        let rec = encode_record(&s);
        assert_eq!(decode_record(StreamId::Esp32Energy, &rec), Some(s.clone()));
        assert_eq!(decode_record(StreamId::IndustrialEnergy, &rec), None);
        for i in 0..rec.len() {
            let mut bad = rec.clone();
            bad[i] ^= 0x40;
            assert_eq!(decode_record(StreamId::Esp32Energy, &bad), None, "flip at {i}");
        }
    }

    #[test]
    fn empty_dir_is_empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(store.recovery_stats().samples.is_empty());
        for s in StreamId::ALL {
            assert_eq!(store.latest(s).unwrap(), None);
        }
        assert!(dir.path().join("MANIFEST").exists());
    }

    #[test]
    fn seqs_and_clamped_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.append(sample(StreamId::IndustrialEnergy, 100, 1.0)).unwrap(), 1);
        let s = store.append_sample(sample(StreamId::IndustrialEnergy, 50, 2.0)).unwrap();
        assert_eq!((s.seq, s.ingest_ts), (2, 100));
        assert_eq!(store.append(sample(StreamId::Environment, 10, 3.0)).unwrap(), 1);
        let mut bad = sample(StreamId::Environment, 10, 3.0);
        bad.fields[1].1 = 101.0;
        assert!(matches!(store.append(bad), Err(StoreError::Invalid(_))));
    }

    #[test]
    fn inclusive_range_and_paging() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        for ts in [10, 20, 30] {
            store.append(sample(StreamId::IndustrialEnergy, ts, ts as f64)).unwrap();
        }
        let ts = |p: &Page| p.samples.iter().map(|s| s.ingest_ts).collect::<Vec<_>>();
        let s = StreamId::IndustrialEnergy;
        assert_eq!(ts(&store.query_range(s, 15, 30, 100, Order::Asc, None).unwrap()), [20, 30]);
        assert!(store.query_range(s, 0, 5, 100, Order::Asc, None).unwrap().samples.is_empty());
        assert_eq!(store.query_range(s, 6, 5, 100, Order::Asc, None), Err(QueryError::InvalidRange { from: 6, to: 5 }));
        assert_eq!(store.query_range(s, 0, 5, 10_001, Order::Asc, None), Err(QueryError::InvalidLimit(10_001)));

        let p1 = store.query_range(s, 0, 100, 2, Order::Desc, None).unwrap();
        assert_eq!((ts(&p1), p1.next_cursor, p1.total), (vec![30, 20], Some(2), 3));
        let p2 = store.query_range(s, 0, 100, 2, Order::Desc, p1.next_cursor).unwrap();
        assert_eq!((ts(&p2), p2.next_cursor), (vec![10], None));
        let a1 = store.query_range(s, 0, 100, 2, Order::Asc, None).unwrap();
        let a2 = store.query_range(s, 0, 100, 2, Order::Asc, a1.next_cursor).unwrap();
        assert_eq!((ts(&a1), ts(&a2)), (vec![10, 20], vec![30]));
    }

    #[test]
    fn segments_roll_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let opts = StoreOptions { segment_bytes: 256, read_only: false };
        {
            let store = Store::open_with(dir.path(), opts.clone()).unwrap();
            for i in 0..50 {
                store.append(sample(StreamId::IndustrialEnergy, i, i as f64)).unwrap();
            }
        }
        assert!(list_segments(&dir.path().join("industrial_energy")).unwrap().len() > 5);
        let store = Store::open_with(dir.path(), opts).unwrap();
        assert_eq!(store.recovery_stats().samples[&StreamId::IndustrialEnergy], 50);
        assert_eq!(store.recovery_stats().truncated_bytes, 0);
        let all = store.query_range(StreamId::IndustrialEnergy, 0, 100, 100, Order::Asc, None).unwrap();
        assert_eq!(all.samples.iter().map(|s| s.seq).collect::<Vec<_>>(), (1..=50).collect::<Vec<_>>());
        assert_eq!(store.append(sample(StreamId::IndustrialEnergy, 60, 0.0)).unwrap(), 51);
    }

    #[test]
    fn read_only_rejects_appends() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open_reader(dir.path()).unwrap();
        assert!(matches!(store.append(sample(StreamId::Environment, 0, 1.0)), Err(StoreError::ReadOnly)));
    }
}
