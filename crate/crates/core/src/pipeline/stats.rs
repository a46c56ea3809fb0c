use std::fmt::Write as _;
use std::sync::atomic::Ordering;

use serde::{Deserialize, Serialize};

use super::{lock, Item, OpKind, PipelineGraph, ProducerSet, Shared};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStat {
    /// Position in the whole stream.
    pub global_index: u64,
    pub epoch: u32,
    pub batch_index: u64,
    pub items: usize,
    pub emitted_at_secs: f64,
    /// Batch size over the time since the previous batch.
    pub items_per_sec: f64,
    /// Per source/map op, in graph order.
    pub busy_fraction: Vec<f64>,
    pub queue_occupancy: Vec<f64>,
    pub sink_occupancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpSnapshot {
    pub id: String,
    pub kind: OpKind,
    pub items: u64,
    /// Summed over workers.
    pub busy_secs: f64,
    pub workers: usize,
    pub queue_capacity: usize,
    /// Items waiting in this op's output queues.
    pub queue_len: usize,
    /// Total slots of those queues.
    pub queue_slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveSnapshot {
    pub elapsed_secs: f64,
    pub ops: Vec<OpSnapshot>,
    pub sink_len: usize,
    pub sink_capacity: usize,
    pub sink_polls: u64,
    pub sink_empty_polls: u64,
    pub batches: u64,
    pub inflight: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub elapsed_secs: f64,
    pub batches: Vec<BatchStat>,
    pub ops: Vec<OpSnapshot>,
    pub max_inflight: i64,
    /// Queue slots plus threads of the configured graph.
    pub inflight_bound: usize,
    pub sink_polls: u64,
    pub sink_empty_polls: u64,
}

pub(super) fn occupancy(out: Option<&ProducerSet<Item>>) -> f64 {
    match out {
        Some(set) => {
            let (len, cap) = set
                .iter()
                .fold((0, 0), |(l, c), q| (l + q.len(), c + q.capacity()));
            len as f64 / cap.max(1) as f64
        }
        None => 0.0,
    }
}

fn op_snapshots(shared: &Shared) -> Vec<OpSnapshot> {
    shared
        .ops
        .iter()
        .map(|rt| {
            let (queue_len, queue_slots) = match lock(&rt.out).as_ref() {
                Some(set) => set
                    .iter()
                    .fold((0, 0), |(l, c), q| (l + q.len(), c + q.capacity())),
                None if rt.kind == OpKind::Sink => (shared.sink.len(), shared.sink.capacity()),
                None => (0, 0),
            };
            OpSnapshot {
                id: rt.id.clone(),
                kind: rt.kind,
                items: rt.items.load(Ordering::Relaxed),
                busy_secs: rt.busy_ns.load(Ordering::Relaxed) as f64 / 1e9,
                workers: rt.workers.load(Ordering::Relaxed),
                queue_capacity: rt.capacity.load(Ordering::Relaxed),
                queue_len,
                queue_slots,
            }
        })
        .collect()
}

pub(super) fn snapshot(shared: &Shared) -> LiveSnapshot {
    LiveSnapshot {
        elapsed_secs: shared.started.elapsed().as_secs_f64(),
        ops: op_snapshots(shared),
        sink_len: shared.sink.len(),
        sink_capacity: shared.sink.capacity(),
        sink_polls: shared.sink_polls.load(Ordering::Relaxed),
        sink_empty_polls: shared.sink_empty_polls.load(Ordering::Relaxed),
        batches: lock(&shared.batch_stats).len() as u64,
        inflight: shared.inflight.load(Ordering::Relaxed),
    }
}

/// Items between creation by a source worker and pickup by the batch op
/// can sit in: output queues, worker input slots, dispatcher staging slots,
/// or be held by a worker or dispatcher thread.
pub fn inflight_bound(graph: &PipelineGraph) -> usize {
    graph
        .tunable_ops()
        .map(|o| o.num_workers * o.queue_capacity + 2 * o.num_workers + o.num_workers + 1)
        .sum()
}

pub(super) fn run_stats(shared: &Shared, graph: &PipelineGraph) -> RunStats {
    RunStats {
        elapsed_secs: shared.started.elapsed().as_secs_f64(),
        batches: lock(&shared.batch_stats).clone(),
        ops: op_snapshots(shared),
        max_inflight: shared.max_inflight.load(Ordering::SeqCst),
        inflight_bound: inflight_bound(graph),
        sink_polls: shared.sink_polls.load(Ordering::Relaxed),
        sink_empty_polls: shared.sink_empty_polls.load(Ordering::Relaxed),
    }
}

impl RunStats {
    /// Mean of the per-batch throughput series.
    pub fn mean_items_per_sec(&self) -> f64 {
        if self.batches.is_empty() {
            return 0.0;
        }
        self.batches.iter().map(|b| b.items_per_sec).sum::<f64>() / self.batches.len() as f64
    }

    /// One row per batch: `batch_index,epoch,items_per_sec`, then
    /// `<op>_busy_fraction,<op>_queue_occupancy` per source/map op, then
    /// `sink_occupancy`.
    pub fn to_csv(&self) -> String {
        let tunable: Vec<&OpSnapshot> = self
            .ops
            .iter()
            .filter(|o| matches!(o.kind, OpKind::Source | OpKind::Map))
            .collect();
        let mut out = String::from("batch_index,epoch,items_per_sec");
        for o in &tunable {
            let _ = write!(out, ",{0}_busy_fraction,{0}_queue_occupancy", o.id);
        }
        out.push_str(",sink_occupancy\n");
        for b in &self.batches {
            let _ = write!(out, "{},{},{:.3}", b.global_index, b.epoch, b.items_per_sec);
            for (busy, occ) in b.busy_fraction.iter().zip(&b.queue_occupancy) {
                let _ = write!(out, ",{busy:.4},{occ:.4}");
            }
            let _ = writeln!(out, ",{:.4}", b.sink_occupancy);
        }
        out
    }
}
