//! Order-preserving multi-stage loading pipeline.
//!
//! A graph is a linear chain `source -> map* -> batch -> sink`. The source
//! and every map op run a pool of workers fed by a dispatcher thread:
//!
//! ```text
//!   upstream workers --> [Connector: pop_from round robin] --> dispatcher
//!   dispatcher --> [staging, expect_consumer round robin] --> this op's workers
//! ```
//!
//! Item `k` of the stream always goes to worker `k mod W`, and the next
//! dispatcher pops the worker queues in the same rotation, so every stage
//! emits items in dataset order no matter how long each transform takes.
//! Worker-count changes take effect at batch boundaries by retiring the old
//! pool behind a switch marker.

mod connector;
mod graph;
mod queue;
mod source;
mod stats;
mod transform;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::format::{FormatError, Sample, Value};

pub use connector::{producer_set, Connector, Msg, PollEvent, ProducerSet, Stager};
pub use graph::{
    fuse_maps, fuse_pairs, MapStep, OpKind, OpNode, PipelineGraph, DEFAULT_QUEUE_CAPACITY,
    MAX_WORKERS,
};
pub use queue::{BoundedQueue, QueueError};
pub use source::{GroupCache, IndexSource, MemorySource, SampleSource};
pub use stats::{BatchStat, LiveSnapshot, OpSnapshot, RunStats};
pub use transform::{
    apply_map, calibrate_busy_work, op_key, sample_seed, FieldNames, Transform, TransformError,
};

use queue::Abort;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline graph: {0}")]
    InvalidGraph(String),
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("value out of bounds: {0}")]
    OutOfBounds(String),
    #[error("op `{op}`: {source}")]
    Transform { op: String, source: TransformError },
    #[error("worker of op `{op}` panicked: {message}")]
    WorkerPanic { op: String, message: String },
    #[error("order violation: expected item {expected}, got {got}")]
    OrderViolation { expected: u64, got: u64 },
    #[error("samples in a batch disagree on the shape of `{0}`")]
    RaggedBatch(String),
    #[error("source: {0}")]
    Source(#[source] Box<dyn std::error::Error + Send + Sync>),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("pipeline shut down")]
    Shutdown,
}

impl PipelineError {
    pub fn source(msg: impl Into<String>) -> Self {
        Self::Source(msg.into().into())
    }
}

impl From<QueueError> for PipelineError {
    fn from(_: QueueError) -> Self {
        Self::Shutdown
    }
}

/// A sample travelling through the pipeline.
#[derive(Debug, Clone)]
pub struct Item {
    pub epoch: u32,
    /// Position in the epoch order.
    pub pos: u64,
    /// Seed identity from `SampleSource::seed_key`.
    pub key: u64,
    /// Position in the whole multi-epoch stream.
    pub seq: u64,
    pub sample: Sample,
}

#[derive(Debug, Clone, Copy)]
struct Ticket {
    epoch: u32,
    pos: u64,
    seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub epoch: u32,
    /// Index within the epoch.
    pub batch_index: u64,
    /// Epoch positions of the samples.
    pub positions: Vec<u64>,
    pub samples: Vec<Sample>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Concatenated bytes of `field` over the batch, leading dimension =
    /// batch size. Fails when samples disagree on the field length.
    pub fn stack(&self, field: &str) -> Result<Vec<u8>, PipelineError> {
        let mut out = Vec::new();
        let mut len = None;
        for s in &self.samples {
            let mut bytes = Vec::new();
            match s.get(field) {
                Some(Value::Str(_)) | None => return Err(PipelineError::RaggedBatch(field.into())),
                Some(v) => v.write_le(&mut bytes),
            }
            if *len.get_or_insert(bytes.len()) != bytes.len() {
                return Err(PipelineError::RaggedBatch(field.into()));
            }
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpUpdate {
    pub workers: Option<usize>,
    pub queue_capacity: Option<usize>,
}

struct OpRuntime {
    id: String,
    kind: OpKind,
    items: AtomicU64,
    busy_ns: AtomicU64,
    workers: AtomicUsize,
    capacity: AtomicUsize,
    pending: Mutex<Option<OpUpdate>>,
    out: Mutex<Option<ProducerSet<Item>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

struct Shared {
    ops: Vec<OpRuntime>,
    base_seed: u64,
    batch_size: usize,
    aborted: AtomicBool,
    failure: Mutex<Option<PipelineError>>,
    queues: Mutex<Vec<Arc<dyn Abort>>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    inflight: AtomicI64,
    max_inflight: AtomicI64,
    sink: Arc<BoundedQueue<Batch>>,
    sink_polls: AtomicU64,
    sink_empty_polls: AtomicU64,
    batch_stats: Mutex<Vec<BatchStat>>,
    started: Instant,
}

impl Shared {
    fn register(&self, q: Arc<dyn Abort>) {
        if self.aborted.load(Ordering::SeqCst) {
            q.abort();
        }
        lock(&self.queues).push(q);
    }

    fn abort_all(&self) {
        self.aborted.store(true, Ordering::SeqCst);
        for q in lock(&self.queues).iter() {
            q.abort();
        }
        self.sink.abort();
    }

    fn fail(&self, e: PipelineError) {
        if !matches!(e, PipelineError::Shutdown) {
            let mut f = lock(&self.failure);
            if f.is_none() {
                log::error!("pipeline failed: {e}");
                *f = Some(e);
            }
        }
        self.abort_all();
    }

    fn spawn(self: &Arc<Self>, name: String, op: usize, body: impl FnOnce() + Send + 'static) {
        let shared = self.clone();
        let handle = thread::Builder::new()
            .name(name)
            .spawn(move || {
                if let Err(payload) = catch_unwind(AssertUnwindSafe(body)) {
                    let message = payload
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| payload.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "unknown panic".into());
                    shared.fail(PipelineError::WorkerPanic {
                        op: shared.ops[op].id.clone(),
                        message,
                    });
                }
            })
            .expect("spawn pipeline thread");
        lock(&self.threads).push(handle);
    }

    fn item_created(&self) {
        let now = self.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_inflight.fetch_max(now, Ordering::SeqCst);
    }
}

enum WorkerMsg<I> {
    Item(I),
    Retire(ProducerSet<Item>),
    End,
}

/// Builds the per-worker processing closure; each worker owns its state.
type WorkFactory<I> =
    Arc<dyn Fn() -> Box<dyn FnMut(I) -> Result<Item, PipelineError> + Send> + Send + Sync>;

struct Crew<I> {
    inputs: Vec<Arc<BoundedQueue<WorkerMsg<I>>>>,
}

fn spawn_crew<I: Send + 'static>(
    shared: &Arc<Shared>,
    op: usize,
    out: ProducerSet<Item>,
    factory: &WorkFactory<I>,
) -> Crew<I> {
    shared.register(out.clone());
    let mut inputs = Vec::with_capacity(out.len());
    for me in 0..out.len() {
        let input = Arc::new(BoundedQueue::new(1));
        shared.register(input.clone());
        inputs.push(input.clone());
        let out = out.clone();
        let mut work = factory();
        let sh = shared.clone();
        shared.spawn(format!("{}-w{me}", shared.ops[op].id), op, move || loop {
            match input.pop() {
                Ok(WorkerMsg::Item(x)) => {
                    let t0 = Instant::now();
                    let result = work(x);
                    let rt = &sh.ops[op];
                    rt.busy_ns
                        .fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
                    match result {
                        Ok(y) => {
                            rt.items.fetch_add(1, Ordering::Relaxed);
                            if out[me].push(Msg::Item(y)).is_err() {
                                return;
                            }
                        }
                        Err(e) => return sh.fail(e),
                    }
                }
                Ok(WorkerMsg::Retire(next)) => {
                    let _ = out[me].push(Msg::Switch(next));
                    return;
                }
                Ok(WorkerMsg::End) => {
                    let _ = out[me].push(Msg::End);
                    return;
                }
                Err(_) => return,
            }
        });
    }
    Crew { inputs }
}

/// Runs one operator's dispatcher: pulls items in order, applies pending
/// config changes at batch boundaries, and deals items round-robin to workers.
fn run_dispatcher<I: Send + 'static>(
    shared: Arc<Shared>,
    op: usize,
    mut next: impl FnMut() -> Result<Option<I>, QueueError>,
    at_boundary: impl Fn(&I) -> bool,
    factory: WorkFactory<I>,
    initial_out: ProducerSet<Item>,
) {
    let rt = &shared.ops[op];
    let mut crew = spawn_crew(&shared, op, initial_out, &factory);
    let mut stager = Stager::new(crew.inputs.len());
    let release = |crew: &Crew<I>, items: Vec<(usize, I)>| -> Result<(), QueueError> {
        for (j, x) in items {
            crew.inputs[j].push(WorkerMsg::Item(x))?;
        }
        Ok(())
    };
    loop {
        let item = match next() {
            Ok(Some(item)) => item,
            Ok(None) => break,
            Err(_) => return,
        };
        if at_boundary(&item) {
            let pending = lock(&rt.pending).take();
            if let Some(update) = pending {
                let workers = update
                    .workers
                    .unwrap_or_else(|| rt.workers.load(Ordering::SeqCst));
                let capacity = update
                    .queue_capacity
                    .unwrap_or_else(|| rt.capacity.load(Ordering::SeqCst));
                if workers != crew.inputs.len() {
                    if release(&crew, stager.flush()).is_err() {
                        return;
                    }
                    let out = producer_set(workers, capacity);
                    for input in &crew.inputs {
                        if input.push(WorkerMsg::Retire(out.clone())).is_err() {
                            return;
                        }
                    }
                    *lock(&rt.out) = Some(out.clone());
                    crew = spawn_crew(&shared, op, out, &factory);
                    stager.resize(workers);
                } else if let Some(out) = lock(&rt.out).as_ref() {
                    out.iter().for_each(|q| q.set_capacity(capacity));
                }
                rt.workers.store(workers, Ordering::SeqCst);
                rt.capacity.store(capacity, Ordering::SeqCst);
                log::debug!(
                    "op {} now runs {workers} workers, queue capacity {capacity}",
                    rt.id
                );
            }
        }
        if let PollEvent::Released(items) = stager.stage(item) {
            if release(&crew, items).is_err() {
                return;
            }
        }
    }
    if release(&crew, stager.flush()).is_err() {
        return;
    }
    for input in &crew.inputs {
        let _ = input.push(WorkerMsg::End);
    }
}

fn run_batcher(shared: Arc<Shared>, op: usize, upstream: ProducerSet<Item>, keep_remainder: bool) {
    let bs = shared.batch_size;
    let mut conn = Connector::with_producers(upstream, 1);
    let mut current: Vec<Item> = Vec::with_capacity(bs);
    let mut expected = 0u64;
    let mut last_emit = shared.started;
    let mut last_busy: Vec<u64> = vec![0; shared.ops.len()];
    let mut emit = |items: &mut Vec<Item>| -> Result<(), QueueError> {
        let first = &items[0];
        let batch = Batch {
            epoch: first.epoch,
            batch_index: first.pos / bs as u64,
            positions: items.iter().map(|i| i.pos).collect(),
            samples: items.drain(..).map(|i| i.sample).collect(),
        };
        let now = Instant::now();
        let dt = now.duration_since(last_emit).as_secs_f64().max(1e-9);
        last_emit = now;
        let mut busy_fraction = Vec::new();
        let mut occupancy = Vec::new();
        for (k, rt) in shared.ops.iter().enumerate() {
            if !matches!(rt.kind, OpKind::Source | OpKind::Map) {
                continue;
            }
            let busy = rt.busy_ns.load(Ordering::Relaxed);
            let workers = rt.workers.load(Ordering::Relaxed).max(1) as f64;
            busy_fraction.push((busy - last_busy[k]) as f64 / 1e9 / dt / workers);
            last_busy[k] = busy;
            occupancy.push(stats::occupancy(lock(&rt.out).as_ref()));
        }
        let global_index = {
            let mut s = lock(&shared.batch_stats);
            let global_index = s.len() as u64;
            s.push(BatchStat {
                global_index,
                epoch: batch.epoch,
                batch_index: batch.batch_index,
                items: batch.len(),
                emitted_at_secs: now.duration_since(shared.started).as_secs_f64(),
                items_per_sec: batch.len() as f64 / dt,
                busy_fraction,
                queue_occupancy: occupancy,
                sink_occupancy: shared.sink.len() as f64 / shared.sink.capacity() as f64,
            });
            global_index
        };
        log::trace!("batch {global_index} ready");
        shared.ops[op]
            .items
            .fetch_add(batch.len() as u64, Ordering::Relaxed);
        shared.sink.push(batch)
    };
    loop {
        let item = match conn.next_item() {
            Ok(Some(item)) => item,
            Ok(None) => break,
            Err(_) => return,
        };
        shared.inflight.fetch_sub(1, Ordering::SeqCst);
        if item.seq != expected {
            return shared.fail(PipelineError::OrderViolation {
                expected,
                got: item.seq,
            });
        }
        expected += 1;
        if current.first().is_some_and(|f| f.epoch != item.epoch) {
            if keep_remainder && emit(&mut current).is_err() {
                return;
            }
            current.clear();
        }
        current.push(item);
        if current.len() == bs && emit(&mut current).is_err() {
            return;
        }
    }
    if keep_remainder && !current.is_empty() && emit(&mut current).is_err() {
        return;
    }
    shared.sink.close();
}

/// A running pipeline. Dropping it stops the workers.
pub struct PipelineHandle {
    shared: Arc<Shared>,
    graph: PipelineGraph,
    joined: bool,
}

/// Starts `graph` over `source`. Batches are read with [`PipelineHandle::next_batch`].
pub fn run_pipeline(
    graph: &PipelineGraph,
    source: Arc<dyn SampleSource>,
) -> Result<PipelineHandle, PipelineError> {
    let graph = graph.clone().validated()?;
    if source.is_empty() {
        return Err(PipelineError::InvalidGraph("source has no samples".into()));
    }
    if graph.ops.iter().any(|o| {
        o.steps
            .iter()
            .any(|s| matches!(s.transform, Transform::Busy { .. }))
    }) {
        calibrate_busy_work();
    }
    let ops = graph
        .ops
        .iter()
        .map(|o| OpRuntime {
            id: o.id.clone(),
            kind: o.kind,
            items: AtomicU64::new(0),
            busy_ns: AtomicU64::new(0),
            workers: AtomicUsize::new(o.num_workers),
            capacity: AtomicUsize::new(o.queue_capacity),
            pending: Mutex::new(None),
            out: Mutex::new(None),
        })
        .collect();
    let shared = Arc::new(Shared {
        ops,
        base_seed: graph.base_seed,
        batch_size: graph.batch_size(),
        aborted: AtomicBool::new(false),
        failure: Mutex::new(None),
        queues: Mutex::new(Vec::new()),
        threads: Mutex::new(Vec::new()),
        inflight: AtomicI64::new(0),
        max_inflight: AtomicI64::new(0),
        sink: Arc::new(BoundedQueue::new(graph.sink_capacity())),
        sink_polls: AtomicU64::new(0),
        sink_empty_polls: AtomicU64::new(0),
        batch_stats: Mutex::new(Vec::new()),
        started: Instant::now(),
    });

    let outs: Vec<ProducerSet<Item>> = graph
        .ops
        .iter()
        .filter(|o| matches!(o.kind, OpKind::Source | OpKind::Map))
        .map(|o| producer_set(o.num_workers, o.queue_capacity))
        .collect();
    let bs = graph.batch_size() as u64;

    // source
    {
        *lock(&shared.ops[0].out) = Some(outs[0].clone());
        let len = source.len() as u64;
        let epochs = graph.epochs;
        let src = source.clone();
        let factory: WorkFactory<Ticket> = {
            let sh = shared.clone();
            Arc::new(move || {
                let src = src.clone();
                let sh = sh.clone();
                let mut cache = GroupCache::default();
                Box::new(move |t: Ticket| {
                    let sample = src.read(t.epoch, t.pos as usize, &mut cache)?;
                    sh.item_created();
                    let key = src.seed_key(t.pos as usize);
                    Ok(Item {
                        epoch: t.epoch,
                        pos: t.pos,
                        key,
                        seq: t.seq,
                        sample,
                    })
                })
            })
        };
        let (mut epoch, mut pos, mut seq) = (0u32, 0u64, 0u64);
        let source = source.clone();
        let next = move || -> Result<Option<Ticket>, QueueError> {
            if pos == len {
                epoch += 1;
                pos = 0;
            }
            if epoch == epochs {
                return Ok(None);
            }
            if pos == 0 {
                source.begin_epoch(epoch);
            }
            let t = Ticket { epoch, pos, seq };
            pos += 1;
            seq += 1;
            Ok(Some(t))
        };
        let sh = shared.clone();
        let out = outs[0].clone();
        shared.spawn("source-dispatch".into(), 0, move || {
            run_dispatcher(
                sh,
                0,
                next,
                move |t: &Ticket| t.pos.is_multiple_of(bs),
                factory,
                out,
            )
        });
    }

    // maps
    for (k, node) in graph
        .ops
        .iter()
        .enumerate()
        .filter(|(_, o)| o.kind == OpKind::Map)
    {
        *lock(&shared.ops[k].out) = Some(outs[k].clone());
        let steps = Arc::new(node.steps.clone());
        let fields = Arc::new(graph.fields.clone());
        let base_seed = shared.base_seed;
        let factory: WorkFactory<Item> = Arc::new(move || {
            let steps = steps.clone();
            let fields = fields.clone();
            Box::new(move |mut item: Item| {
                for step in steps.iter() {
                    let seed = sample_seed(base_seed, item.epoch, item.key, &step.op_id);
                    item.sample = apply_map(&step.transform, &fields, item.sample, seed).map_err(
                        |source| PipelineError::Transform {
                            op: step.op_id.clone(),
                            source,
                        },
                    )?;
                }
                Ok(item)
            })
        });
        let mut conn = Connector::with_producers(outs[k - 1].clone(), 1);
        let sh = shared.clone();
        let out = outs[k].clone();
        shared.spawn(format!("{}-dispatch", node.id), k, move || {
            run_dispatcher(
                sh,
                k,
                move || conn.next_item(),
                move |i: &Item| i.pos.is_multiple_of(bs),
                factory,
                out,
            )
        });
    }

    let batch_op = graph.ops.len() - 2;
    let sh = shared.clone();
    let last = outs.last().expect("source output").clone();
    let keep = graph.keep_remainder;
    shared.spawn("batch".into(), batch_op, move || {
        run_batcher(sh, batch_op, last, keep)
    });

    Ok(PipelineHandle {
        shared,
        graph,
        joined: false,
    })
}

impl PipelineHandle {
    pub fn graph(&self) -> &PipelineGraph {
        &self.graph
    }

    /// Blocks for the next batch. `None` once the stream has ended; a
    /// failure is reported once, then `None`.
    pub fn next_batch(&self) -> Option<Result<Batch, PipelineError>> {
        let sh = &self.shared;
        sh.sink_polls.fetch_add(1, Ordering::Relaxed);
        if sh.sink.is_empty() {
            sh.sink_empty_polls.fetch_add(1, Ordering::Relaxed);
        }
        match sh.sink.pop() {
            Ok(b) => Some(Ok(b)),
            Err(_) => lock(&sh.failure).take().map(Err),
        }
    }

    /// Like [`next_batch`](Self::next_batch) but gives up after `timeout`.
    pub fn next_batch_timeout(&self, timeout: Duration) -> Option<Result<Batch, PipelineError>> {
        let sh = &self.shared;
        sh.sink_polls.fetch_add(1, Ordering::Relaxed);
        if sh.sink.is_empty() {
            sh.sink_empty_polls.fetch_add(1, Ordering::Relaxed);
        }
        match sh.sink.pop_timeout(timeout) {
            Ok(Some(b)) => Some(Ok(b)),
            Ok(None) => None,
            Err(_) => lock(&sh.failure).take().map(Err),
        }
    }

    /// Requests a new worker count and/or queue capacity for a source or
    /// map op, applied by its dispatcher at the next batch boundary.
    pub fn update_op_config(
        &self,
        op_id: &str,
        workers: Option<usize>,
        queue_capacity: Option<usize>,
    ) -> Result<(), PipelineError> {
        let rt = self
            .shared
            .ops
            .iter()
            .find(|o| o.id == op_id)
            .ok_or_else(|| PipelineError::UnknownOp(op_id.into()))?;
        if !matches!(rt.kind, OpKind::Source | OpKind::Map) {
            return Err(PipelineError::OutOfBounds(format!(
                "op `{op_id}` is not tunable"
            )));
        }
        if let Some(w) = workers {
            if w == 0 || w > MAX_WORKERS {
                return Err(PipelineError::OutOfBounds(format!(
                    "workers {w} not in [1, {MAX_WORKERS}]"
                )));
            }
        }
        if queue_capacity == Some(0) {
            return Err(PipelineError::OutOfBounds(
                "queue capacity must be positive".into(),
            ));
        }
        let mut pending = lock(&rt.pending);
        let merged = pending.get_or_insert_with(OpUpdate::default);
        merged.workers = workers.or(merged.workers);
        merged.queue_capacity = queue_capacity.or(merged.queue_capacity);
        Ok(())
    }

    /// Current `(workers, queue_capacity)` of an op, as last applied.
    pub fn op_config(&self, op_id: &str) -> Option<(usize, usize)> {
        self.shared.ops.iter().find(|o| o.id == op_id).map(|o| {
            (
                o.workers.load(Ordering::SeqCst),
                o.capacity.load(Ordering::SeqCst),
            )
        })
    }

    /// Whether every requested config change has been applied.
    pub fn updates_applied(&self) -> bool {
        self.shared.ops.iter().all(|o| lock(&o.pending).is_none())
    }

    pub fn snapshot(&self) -> LiveSnapshot {
        stats::snapshot(&self.shared)
    }

    /// Read-only view for monitoring threads.
    pub fn probe(&self) -> PipelineProbe {
        PipelineProbe {
            shared: self.shared.clone(),
        }
    }

    pub fn batch_stats(&self) -> Vec<BatchStat> {
        lock(&self.shared.batch_stats).clone()
    }

    /// Stops every worker without reporting an error.
    pub fn shutdown(&mut self) {
        self.shared.abort_all();
        self.join();
    }

    fn join(&mut self) {
        if self.joined {
            return;
        }
        loop {
            let handles: Vec<_> = lock(&self.shared.threads).drain(..).collect();
            if handles.is_empty() {
                break;
            }
            for h in handles {
                let _ = h.join();
            }
        }
        self.joined = true;
    }

    /// Waits for every thread and returns the run statistics, or the first
    /// failure not already returned by `next_batch`.
    pub fn finish(mut self) -> Result<RunStats, PipelineError> {
        self.join();
        if let Some(e) = lock(&self.shared.failure).take() {
            return Err(e);
        }
        Ok(stats::run_stats(&self.shared, &self.graph))
    }
}

impl Drop for PipelineHandle {
    fn drop(&mut self) {
        if !self.joined {
            self.shared.abort_all();
            self.join();
        }
    }
}

/// Cloneable read-only view of a running pipeline.
#[derive(Clone)]
pub struct PipelineProbe {
    shared: Arc<Shared>,
}

impl PipelineProbe {
    pub fn snapshot(&self) -> LiveSnapshot {
        stats::snapshot(&self.shared)
    }

    /// True once the pipeline was aborted or has produced its last batch.
    pub fn is_stopped(&self) -> bool {
        self.shared.aborted.load(Ordering::SeqCst) || self.shared.sink.is_closed()
    }
}

/// Runs `graph` to completion and collects every batch.
pub fn collect_batches(
    graph: &PipelineGraph,
    source: Arc<dyn SampleSource>,
) -> Result<(Vec<Batch>, RunStats), PipelineError> {
    let handle = run_pipeline(graph, source)?;
    let mut batches = Vec::new();
    while let Some(b) = handle.next_batch() {
        batches.push(b?);
    }
    let stats = handle.finish()?;
    Ok((batches, stats))
}
