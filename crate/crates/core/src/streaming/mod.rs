//! Streaming a dataset from an object store under a disk budget.
//!
//! Three roles cooperate around a shared staging table:
//!
//! - the download worker walks the per-epoch download plan, waits for disk
//!   admission, fetches each slice to a temp file, verifies size and CRC32
//!   and renames it into the staging directory;
//! - the evict worker deletes fully consumed slices, oldest consumed first,
//!   whenever staged bytes plus a blocked download exceed
//!   `quota * watermark`;
//! - the processing pipeline reads samples through [`StreamSource`], which
//!   blocks until the slice holding a sample is staged for that epoch.
//!
//! A download is admitted when `staged + size <= quota`, or when nothing is
//! staged at all, so staged bytes never exceed `quota + max slice size`.

mod server;
mod store;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use server::StoreServer;
pub use store::{open_store, HttpStore, LocalDirStore, ObjectInfo, ObjectStore, CRC32_HEADER};

use crate::distributed::{shard_index, ShardSpec};
use crate::format::{SliceFile, SliceSummary, META_INDEX_NAME};
use crate::index::{build_index, pad_for_shards, IndexTable, MetadataEntry};
use crate::pipeline::{
    run_pipeline, Batch, GroupCache, PipelineError, PipelineGraph, PipelineHandle, RunStats,
    SampleSource,
};

#[derive(Debug, Clone, Error)]
pub enum StreamError {
    #[error("store unreachable while fetching `{target}`: {reason}")]
    StoreUnreachable { target: String, reason: String },
    #[error("store has no `{META_INDEX_NAME}` object")]
    MissingMetaIndex,
    #[error("malformed meta index: {0}")]
    BadMetaIndex(String),
    #[error("object `{0}` not found")]
    NotFound(String),
    #[error("integrity check failed for `{name}`: {reason}")]
    IntegrityFailure { name: String, reason: String },
    #[error("invalid disk budget: {0}")]
    InvalidBudget(String),
    #[error("staging: {0}")]
    Io(String),
    #[error("{0}")]
    Setup(String),
}

impl StreamError {
    pub(crate) fn unreachable(target: impl Into<String>, reason: impl ToString) -> Self {
        Self::StoreUnreachable {
            target: target.into(),
            reason: reason.to_string(),
        }
    }
}

impl From<io::Error> for StreamError {
    fn from(e: io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiskBudget {
    pub quota_bytes: u64,
    /// Eviction starts above `quota_bytes * watermark`.
    pub watermark: f64,
    pub staging_dir: PathBuf,
}

impl DiskBudget {
    pub const DEFAULT_WATERMARK: f64 = 0.8;

    pub fn new(quota_bytes: u64, staging_dir: impl Into<PathBuf>) -> Self {
        Self {
            quota_bytes,
            watermark: Self::DEFAULT_WATERMARK,
            staging_dir: staging_dir.into(),
        }
    }

    pub fn with_watermark(mut self, watermark: f64) -> Self {
        self.watermark = watermark;
        self
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        if !(self.watermark > 0.0 && self.watermark <= 1.0) {
            return Err(StreamError::InvalidBudget(format!(
                "watermark {} not in (0, 1]",
                self.watermark
            )));
        }
        if self.quota_bytes == 0 {
            return Err(StreamError::InvalidBudget("quota must be positive".into()));
        }
        Ok(())
    }

    fn threshold(&self) -> f64 {
        self.quota_bytes as f64 * self.watermark
    }
}

/// Slice summaries from the store plus the index they describe.
#[derive(Debug, Clone)]
pub struct MetaIndex {
    pub slices: Vec<SliceSummary>,
    pub index: IndexTable,
}

impl MetaIndex {
    pub fn total_samples(&self) -> u64 {
        self.slices.iter().map(|s| s.samples).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.slices.iter().map(|s| s.bytes).sum()
    }

    pub fn max_slice_bytes(&self) -> u64 {
        self.slices.iter().map(|s| s.bytes).max().unwrap_or(0)
    }
}

/// Downloads and validates the meta-index object. No slice is fetched.
pub fn fetch_meta_index(store: &dyn ObjectStore) -> Result<MetaIndex, StreamError> {
    let bytes = match store.get(META_INDEX_NAME) {
        Ok(b) => b,
        Err(StreamError::NotFound(_)) => return Err(StreamError::MissingMetaIndex),
        Err(e) => return Err(e),
    };
    let slices: Vec<SliceSummary> =
        serde_json::from_slice(&bytes).map_err(|e| StreamError::BadMetaIndex(e.to_string()))?;
    if slices.is_empty() {
        return Err(StreamError::BadMetaIndex("no slices listed".into()));
    }
    let mut headers = Vec::with_capacity(slices.len());
    for (i, s) in slices.iter().enumerate() {
        let h = s
            .header
            .as_ref()
            .ok_or_else(|| StreamError::BadMetaIndex(format!("`{}` has no header", s.name)))?;
        if h.slice_index as usize != i
            || h.sample_count() != s.samples
            || h.slice_paths.get(i) != Some(&s.name)
        {
            return Err(StreamError::BadMetaIndex(format!(
                "entry {i} (`{}`) disagrees with its header",
                s.name
            )));
        }
        if s.bytes == 0 {
            return Err(StreamError::BadMetaIndex(format!(
                "`{}` has zero size",
                s.name
            )));
        }
        headers.push(h.clone());
    }
    let index = build_index(&headers).map_err(|e| StreamError::BadMetaIndex(e.to_string()))?;
    Ok(MetaIndex { slices, index })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownloadRequest {
    pub object_name: String,
    pub slice_index: u32,
    pub expected_size: u64,
    pub expected_crc32: u32,
    /// `(epoch, sample id)` of the first read that needs this object.
    pub needed_by: (u32, u64),
    /// Reads of this slice in the epoch.
    pub reads: usize,
}

/// Shard-local entries of `meta` for `spec`, padding the index as needed.
pub fn shard_entries(meta: &MetaIndex, spec: ShardSpec) -> Result<Vec<MetadataEntry>, StreamError> {
    let padded = pad_for_shards(&meta.index, spec.num_shards);
    let shard = shard_index(&padded, spec).map_err(|e| StreamError::Setup(e.to_string()))?;
    Ok(shard.sample_meta_list)
}

/// One request per slice the shard touches, in order of first use.
pub fn plan_epoch_downloads(
    meta: &MetaIndex,
    spec: ShardSpec,
    epoch: u32,
) -> Result<Vec<DownloadRequest>, StreamError> {
    plan_for_entries(meta, &shard_entries(meta, spec)?, epoch)
}

fn plan_for_entries(
    meta: &MetaIndex,
    entries: &[MetadataEntry],
    epoch: u32,
) -> Result<Vec<DownloadRequest>, StreamError> {
    let mut plan: Vec<DownloadRequest> = Vec::new();
    let mut slot: BTreeMap<u32, usize> = BTreeMap::new();
    for e in entries {
        if let Some(&i) = slot.get(&e.shard_id) {
            plan[i].reads += 1;
            continue;
        }
        let s = meta
            .slices
            .get(e.shard_id as usize)
            .ok_or_else(|| StreamError::BadMetaIndex(format!("slice {} not listed", e.shard_id)))?;
        slot.insert(e.shard_id, plan.len());
        plan.push(DownloadRequest {
            object_name: s.name.clone(),
            slice_index: e.shard_id,
            expected_size: s.bytes,
            expected_crc32: s.crc32,
            needed_by: (epoch, e.sample_id),
            reads: 1,
        });
    }
    Ok(plan)
}

struct CrcWriter<W> {
    inner: W,
    hasher: crc32fast::Hasher,
    len: u64,
}

impl<W: Write> Write for CrcWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.len += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DownloadOutcome {
    pub path: PathBuf,
    pub bytes: u64,
    pub attempts: u32,
}

fn fetch_once(
    store: &dyn ObjectStore,
    req: &DownloadRequest,
    tmp: &Path,
) -> Result<(), StreamError> {
    let mut w = CrcWriter {
        inner: BufWriter::new(File::create(tmp)?),
        hasher: crc32fast::Hasher::new(),
        len: 0,
    };
    store.get_into(&req.object_name, &mut w)?;
    w.flush()?;
    let crc = w.hasher.clone().finalize();
    if w.len != req.expected_size {
        return Err(StreamError::IntegrityFailure {
            name: req.object_name.clone(),
            reason: format!("size {} != expected {}", w.len, req.expected_size),
        });
    }
    if crc != req.expected_crc32 {
        return Err(StreamError::IntegrityFailure {
            name: req.object_name.clone(),
            reason: format!("crc32 {crc:08x} != expected {:08x}", req.expected_crc32),
        });
    }
    w.inner
        .into_inner()
        .map_err(|e| e.into_error())?
        .sync_all()?;
    Ok(())
}

/// Fetches `req` into `dir` via a temp file and an atomic rename, retrying once.
pub fn download_object(
    store: &dyn ObjectStore,
    req: &DownloadRequest,
    dir: &Path,
) -> Result<DownloadOutcome, StreamError> {
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{}.part", req.object_name));
    let dest = dir.join(&req.object_name);
    let mut attempts = 0;
    loop {
        attempts += 1;
        match fetch_once(store, req, &tmp) {
            Ok(()) => {
                fs::rename(&tmp, &dest)?;
                return Ok(DownloadOutcome {
                    path: dest,
                    bytes: req.expected_size,
                    attempts,
                });
            }
            Err(
                e @ (StreamError::IntegrityFailure { .. } | StreamError::StoreUnreachable { .. }),
            ) if attempts < 2 => {
                log::warn!("retrying `{}` after: {e}", req.object_name);
            }
            Err(e) => {
                let _ = fs::remove_file(&tmp);
                return Err(e);
            }
        }
    }
}

/// Staging-table events, in the order they happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessEvent {
    Staged {
        slice: u32,
        generation: u32,
    },
    Read {
        slice: u32,
        generation: u32,
        epoch: u32,
    },
    Evicted {
        slice: u32,
        generation: u32,
    },
}

/// Reads that targeted a slice generation after it was evicted.
pub fn reads_after_eviction(log: &[AccessEvent]) -> Vec<AccessEvent> {
    let mut evicted = std::collections::HashSet::new();
    let mut bad = Vec::new();
    for ev in log {
        match *ev {
            AccessEvent::Evicted { slice, generation } => {
                evicted.insert((slice, generation));
            }
            AccessEvent::Read {
                slice, generation, ..
            } if evicted.contains(&(slice, generation)) => bad.push(*ev),
            _ => {}
        }
    }
    bad
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StreamStats {
    pub downloads: u64,
    pub retries: u64,
    pub evictions: u64,
    pub bytes_downloaded: u64,
    pub peak_staged_bytes: u64,
    pub quota_bytes: u64,
    pub max_slice_bytes: u64,
    pub access_log: Vec<AccessEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Absent,
    Downloading,
    Ready,
}

#[derive(Debug)]
struct SliceSlot {
    status: Status,
    bytes: u64,
    generation: u32,
    file: Option<Arc<SliceFile>>,
    path: Option<PathBuf>,
    /// Remaining reads per epoch this staged copy must serve.
    armed: BTreeMap<u32, usize>,
    in_progress: usize,
    consumed_seq: Option<u64>,
}

#[derive(Debug)]
struct Table {
    slots: Vec<SliceSlot>,
    staged: u64,
    waiting: u64,
    consumed_counter: u64,
    failure: Option<StreamError>,
    stop: bool,
    stats: StreamStats,
}

struct Staging {
    table: Mutex<Table>,
    cond: Condvar,
    budget: DiskBudget,
}

impl Staging {
    fn lock(&self) -> MutexGuard<'_, Table> {
        self.table.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn fail(&self, err: StreamError) {
        let mut t = self.lock();
        t.failure.get_or_insert(err);
        self.cond.notify_all();
    }

    fn stop(&self) {
        self.lock().stop = true;
        self.cond.notify_all();
    }
}

fn download_loop(
    staging: &Staging,
    store: &dyn ObjectStore,
    plans: Vec<(u32, Vec<DownloadRequest>)>,
) {
    let quota = staging.budget.quota_bytes;
    for (epoch, plan) in plans {
        for req in plan {
            let s = req.slice_index as usize;
            let mut t = staging.lock();
            if t.slots[s].status == Status::Ready {
                let slot = &mut t.slots[s];
                slot.armed.insert(epoch, req.reads);
                slot.consumed_seq = None;
                staging.cond.notify_all();
                continue;
            }
            loop {
                if t.stop || t.failure.is_some() {
                    return;
                }
                if t.staged == 0 || t.staged + req.expected_size <= quota {
                    break;
                }
                t.waiting = req.expected_size;
                staging.cond.notify_all();
                t = staging.cond.wait(t).unwrap_or_else(|p| p.into_inner());
            }
            t.waiting = 0;
            t.staged += req.expected_size;
            t.stats.peak_staged_bytes = t.stats.peak_staged_bytes.max(t.staged);
            t.slots[s].status = Status::Downloading;
            drop(t);

            let result =
                download_object(store, &req, &staging.budget.staging_dir).and_then(|out| {
                    let file =
                        SliceFile::open(&out.path).map_err(|e| StreamError::IntegrityFailure {
                            name: req.object_name.clone(),
                            reason: e.to_string(),
                        })?;
                    Ok((out, file))
                });
            let mut t = staging.lock();
            match result {
                Ok((out, file)) => {
                    t.stats.downloads += 1;
                    t.stats.retries += u64::from(out.attempts - 1);
                    t.stats.bytes_downloaded += out.bytes;
                    let slot = &mut t.slots[s];
                    slot.status = Status::Ready;
                    slot.bytes = out.bytes;
                    slot.generation += 1;
                    slot.file = Some(Arc::new(file));
                    slot.path = Some(out.path);
                    slot.armed.insert(epoch, req.reads);
                    slot.consumed_seq = None;
                    let generation = slot.generation;
                    t.stats.access_log.push(AccessEvent::Staged {
                        slice: req.slice_index,
                        generation,
                    });
                }
                Err(e) => {
                    t.staged -= req.expected_size;
                    t.slots[s].status = Status::Absent;
                    t.failure.get_or_insert(e);
                }
            }
            staging.cond.notify_all();
        }
    }
}

/// Deletes consumed slices, oldest consumed first, until the staged bytes
/// plus any blocked download fit under `threshold`. Returns the evictions.
fn evict_pass(t: &mut Table, threshold: f64) -> usize {
    let mut evicted = 0;
    while (t.staged + t.waiting) as f64 > threshold {
        let victim = t
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.status == Status::Ready && s.armed.is_empty() && s.in_progress == 0)
            .min_by_key(|(_, s)| s.consumed_seq)
            .map(|(i, _)| i);
        let Some(i) = victim else { break };
        let slot = &mut t.slots[i];
        if let Some(path) = slot.path.take() {
            if let Err(e) = fs::remove_file(&path) {
                log::warn!("evicting {}: {e}", path.display());
            }
        }
        slot.file = None;
        slot.status = Status::Absent;
        let (bytes, generation) = (slot.bytes, slot.generation);
        t.staged -= bytes;
        t.stats.evictions += 1;
        t.stats.access_log.push(AccessEvent::Evicted {
            slice: i as u32,
            generation,
        });
        evicted += 1;
    }
    evicted
}

fn evict_loop(staging: &Staging) {
    let threshold = staging.budget.threshold();
    let mut t = staging.lock();
    loop {
        if t.stop {
            return;
        }
        if evict_pass(&mut t, threshold) > 0 {
            staging.cond.notify_all();
        }
        t = staging
            .cond
            .wait_timeout(t, Duration::from_millis(50))
            .unwrap_or_else(|p| p.into_inner())
            .0;
    }
}

/// Pipeline source that reads slices as they become staged.
pub struct StreamSource {
    staging: Arc<Staging>,
    entries: Vec<MetadataEntry>,
}

impl SampleSource for StreamSource {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn seed_key(&self, pos: usize) -> u64 {
        self.entries[pos].ordinal
    }

    fn read(
        &self,
        epoch: u32,
        pos: usize,
        cache: &mut GroupCache,
    ) -> Result<crate::format::Sample, PipelineError> {
        let entry = &self.entries[pos];
        let s = entry.shard_id as usize;
        let file = {
            let mut t = self.staging.lock();
            loop {
                if let Some(e) = &t.failure {
                    return Err(PipelineError::Source(Box::new(e.clone())));
                }
                if t.stop {
                    return Err(PipelineError::Shutdown);
                }
                let slot = &t.slots[s];
                if slot.status == Status::Ready && slot.armed.contains_key(&epoch) {
                    break;
                }
                t = self.staging.cond.wait(t).unwrap_or_else(|p| p.into_inner());
            }
            let slot = &mut t.slots[s];
            slot.in_progress += 1;
            let generation = slot.generation;
            let file = slot.file.clone().expect("ready slot has a file");
            t.stats.access_log.push(AccessEvent::Read {
                slice: s as u32,
                generation,
                epoch,
            });
            file
        };
        let result = cache.read(&file, entry);
        let mut t = self.staging.lock();
        let seq = t.consumed_counter;
        let slot = &mut t.slots[s];
        slot.in_progress -= 1;
        if let Some(n) = slot.armed.get_mut(&epoch) {
            *n -= 1;
            if *n == 0 {
                slot.armed.remove(&epoch);
            }
        }
        if slot.armed.is_empty() && slot.in_progress == 0 {
            slot.consumed_seq = Some(seq);
            t.consumed_counter += 1;
        }
        self.staging.cond.notify_all();
        result
    }
}

/// A running streamed pipeline.
pub struct StreamHandle {
    pipeline: Option<PipelineHandle>,
    staging: Arc<Staging>,
    workers: Vec<JoinHandle<()>>,
    meta: MetaIndex,
}

impl StreamHandle {
    pub fn next_batch(&self) -> Option<Result<Batch, PipelineError>> {
        self.pipeline.as_ref()?.next_batch()
    }

    pub fn next_batch_timeout(&self, timeout: Duration) -> Option<Result<Batch, PipelineError>> {
        self.pipeline.as_ref()?.next_batch_timeout(timeout)
    }

    pub fn pipeline(&self) -> &PipelineHandle {
        self.pipeline
            .as_ref()
            .expect("pipeline present until finish")
    }

    pub fn meta_index(&self) -> &MetaIndex {
        &self.meta
    }

    /// Live copy of the download/evict counters.
    pub fn stats(&self) -> StreamStats {
        self.staging.lock().stats.clone()
    }

    /// Stream-level failure, if any worker hit one.
    pub fn failure(&self) -> Option<StreamError> {
        self.staging.lock().failure.clone()
    }

    /// Stops all workers and returns the pipeline and stream statistics.
    pub fn finish(mut self) -> Result<(RunStats, StreamStats), PipelineError> {
        let pipeline = self.pipeline.take().expect("pipeline present until finish");
        let run = pipeline.finish();
        self.stop_workers();
        let stats = self.staging.lock().stats.clone();
        Ok((run?, stats))
    }

    fn stop_workers(&mut self) {
        self.staging.stop();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for StreamHandle {
    fn drop(&mut self) {
        // pipeline first, so its readers stop waiting on the staging table
        self.staging.stop();
        drop(self.pipeline.take());
        self.stop_workers();
    }
}

/// Runs `graph` over the shard `spec` of a remote dataset, staging slices
/// under `budget`. Output is identical to running the same graph over the
/// same shard of a local copy.
pub fn stream_dataset(
    store: Arc<dyn ObjectStore>,
    budget: DiskBudget,
    spec: ShardSpec,
    graph: &PipelineGraph,
) -> Result<StreamHandle, StreamError> {
    budget.validate()?;
    let graph = graph
        .clone()
        .validated()
        .map_err(|e| StreamError::Setup(e.to_string()))?;
    let meta = fetch_meta_index(store.as_ref())?;
    let entries = shard_entries(&meta, spec)?;
    let plans = (0..graph.epochs)
        .map(|e| plan_for_entries(&meta, &entries, e).map(|p| (e, p)))
        .collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(&budget.staging_dir)?;
    let slots = meta
        .slices
        .iter()
        .map(|s| SliceSlot {
            status: Status::Absent,
            bytes: s.bytes,
            generation: 0,
            file: None,
            path: None,
            armed: BTreeMap::new(),
            in_progress: 0,
            consumed_seq: None,
        })
        .collect();
    let stats = StreamStats {
        quota_bytes: budget.quota_bytes,
        max_slice_bytes: meta.max_slice_bytes(),
        ..StreamStats::default()
    };
    let staging = Arc::new(Staging {
        table: Mutex::new(Table {
            slots,
            staged: 0,
            waiting: 0,
            consumed_counter: 0,
            failure: None,
            stop: false,
            stats,
        }),
        cond: Condvar::new(),
        budget,
    });

    let mut workers = Vec::new();
    let st = staging.clone();
    workers.push(
        thread::Builder::new()
            .name("stream-download".into())
            .spawn(move || download_loop(&st, store.as_ref(), plans))
            .map_err(|e| StreamError::Setup(e.to_string()))?,
    );
    let st = staging.clone();
    workers.push(
        thread::Builder::new()
            .name("stream-evict".into())
            .spawn(move || evict_loop(&st))
            .map_err(|e| StreamError::Setup(e.to_string()))?,
    );
    let source = Arc::new(StreamSource {
        staging: staging.clone(),
        entries,
    });
    let pipeline = match run_pipeline(&graph, source) {
        Ok(p) => p,
        Err(e) => {
            staging.fail(StreamError::Setup(e.to_string()));
            staging.stop();
            for w in workers {
                let _ = w.join();
            }
            return Err(StreamError::Setup(e.to_string()));
        }
    };
    Ok(StreamHandle {
        pipeline: Some(pipeline),
        staging,
        workers,
        meta,
    })
}
