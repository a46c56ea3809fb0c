use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::AutotuneError;
use crate::pipeline::{LiveSnapshot, OpKind, PipelineProbe};
use crate::sys;

pub const DEFAULT_INTERVAL: Duration = Duration::from_millis(10);
pub const MIN_WINDOW: usize = 30;
pub const DEFAULT_EMPTY_RATIO_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpMetrics {
    pub id: String,
    pub workers: usize,
    pub queue_capacity: usize,
    /// Items finished since the previous sample.
    pub items: u64,
    /// Worker time per finished item since the previous sample, in ms.
    pub delay_ms: f64,
    pub busy_secs: f64,
    /// Output queue occupancy over capacity, in `[0, 1]`.
    pub queue_utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSample {
    /// Seconds since the monitor started.
    pub timestamp_secs: f64,
    pub ops: Vec<OpMetrics>,
    /// Process CPU time over wall time since the previous sample.
    pub cpu_percent: f64,
    /// Consumer polls of the sink since the previous sample.
    pub sink_polls: u64,
    pub sink_empty_polls: u64,
    pub sink_len: usize,
    pub sink_capacity: usize,
    pub rss_bytes: u64,
    pub batches: u64,
}

struct Cursor {
    snap: LiveSnapshot,
    cpu: f64,
    at: Instant,
}

impl Cursor {
    fn new(snap: LiveSnapshot) -> Self {
        Self {
            snap,
            cpu: sys::process_cpu_secs(),
            at: Instant::now(),
        }
    }

    fn advance(&mut self, snap: LiveSnapshot, started: Instant) -> MetricsSample {
        let now = Instant::now();
        let cpu = sys::process_cpu_secs();
        let wall = now.duration_since(self.at).as_secs_f64();
        let ops = snap
            .ops
            .iter()
            .filter(|o| matches!(o.kind, OpKind::Source | OpKind::Map))
            .map(|o| {
                let prev = self.snap.ops.iter().find(|p| p.id == o.id);
                let items = o.items.saturating_sub(prev.map_or(0, |p| p.items));
                let busy = (o.busy_secs - prev.map_or(0.0, |p| p.busy_secs)).max(0.0);
                OpMetrics {
                    id: o.id.clone(),
                    workers: o.workers,
                    queue_capacity: o.queue_capacity,
                    items,
                    delay_ms: if items > 0 {
                        busy * 1e3 / items as f64
                    } else {
                        0.0
                    },
                    busy_secs: busy,
                    queue_utilization: if o.queue_slots > 0 {
                        (o.queue_len as f64 / o.queue_slots as f64).clamp(0.0, 1.0)
                    } else {
                        0.0
                    },
                }
            })
            .collect();
        let sample = MetricsSample {
            timestamp_secs: now.duration_since(started).as_secs_f64(),
            ops,
            cpu_percent: if wall > 0.0 {
                ((cpu - self.cpu) / wall * 100.0).max(0.0)
            } else {
                0.0
            },
            sink_polls: snap.sink_polls.saturating_sub(self.snap.sink_polls),
            sink_empty_polls: snap
                .sink_empty_polls
                .saturating_sub(self.snap.sink_empty_polls),
            sink_len: snap.sink_len,
            sink_capacity: snap.sink_capacity,
            rss_bytes: sys::rss_bytes(),
            batches: snap.batches,
        };
        self.snap = snap;
        self.cpu = cpu;
        self.at = now;
        sample
    }
}

/// Background sampler of a running pipeline.
pub struct Monitor {
    samples: Arc<Mutex<Vec<MetricsSample>>>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Monitor {
    pub fn start(probe: PipelineProbe, interval: Duration) -> Self {
        let samples = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let (out, flag) = (samples.clone(), stop.clone());
        let thread = thread::Builder::new()
            .name("pcpipe-monitor".into())
            .spawn(move || {
                let started = Instant::now();
                let mut cursor = Cursor::new(probe.snapshot());
                let mut next = started + interval;
                while !flag.load(Ordering::Relaxed) {
                    let now = Instant::now();
                    if next > now {
                        thread::sleep(next - now);
                    }
                    next += interval;
                    let sample = cursor.advance(probe.snapshot(), started);
                    out.lock().unwrap_or_else(|p| p.into_inner()).push(sample);
                    if probe.is_stopped() {
                        break;
                    }
                }
            })
            .expect("spawn monitor thread");
        Self {
            samples,
            stop,
            thread: Some(thread),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Removes and returns the samples collected so far.
    pub fn drain(&self) -> Vec<MetricsSample> {
        std::mem::take(&mut *self.samples.lock().unwrap_or_else(|p| p.into_inner()))
    }

    /// Stops sampling and returns the samples not yet drained.
    pub fn stop(mut self) -> Vec<MetricsSample> {
        self.halt();
        self.drain()
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Monitor {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Samples `probe` every `interval` for `duration`.
pub fn collect_metrics(
    probe: &PipelineProbe,
    interval: Duration,
    duration: Duration,
) -> Result<Vec<MetricsSample>, AutotuneError> {
    if probe.is_stopped() {
        return Err(AutotuneError::PipelineStopped);
    }
    let started = Instant::now();
    let mut cursor = Cursor::new(probe.snapshot());
    let mut out = Vec::new();
    let mut next = started + interval;
    while next <= started + duration {
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        }
        out.push(cursor.advance(probe.snapshot(), started));
        next += interval;
        if probe.is_stopped() {
            break;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    /// The consumer waits on data: the pipeline is too slow.
    DataSide,
    /// Data is ready before the consumer asks for it.
    NetworkSide,
}

/// Fraction of consumer polls that found the sink empty. Falls back to the
/// fraction of samples with an empty sink when the consumer never polled.
pub fn sink_empty_ratio(window: &[MetricsSample]) -> f64 {
    let polls: u64 = window.iter().map(|s| s.sink_polls).sum();
    if polls > 0 {
        window.iter().map(|s| s.sink_empty_polls).sum::<u64>() as f64 / polls as f64
    } else if window.is_empty() {
        0.0
    } else {
        window.iter().filter(|s| s.sink_len == 0).count() as f64 / window.len() as f64
    }
}

/// Mean worker time per item of `op` over the window, in ms.
pub fn op_delay_ms(window: &[MetricsSample], op: &str) -> f64 {
    let (busy, items) = window
        .iter()
        .flat_map(|s| s.ops.iter().filter(|o| o.id == op))
        .fold((0.0, 0u64), |(b, n), o| (b + o.busy_secs, n + o.items));
    if items == 0 {
        0.0
    } else {
        busy * 1e3 / items as f64
    }
}

pub fn detect_bottleneck(
    window: &[MetricsSample],
    threshold: f64,
) -> Result<Bottleneck, AutotuneError> {
    if window.len() < MIN_WINDOW {
        return Err(AutotuneError::InsufficientSamples {
            got: window.len(),
            need: MIN_WINDOW,
        });
    }
    Ok(if sink_empty_ratio(window) > threshold {
        Bottleneck::DataSide
    } else {
        Bottleneck::NetworkSide
    })
}
