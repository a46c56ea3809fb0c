//! Repeated timed runs of a pipeline with CPU and memory sampling.
//!
//! CSV output has one row per run:
//!
//! ```text
//! run,cost_time_s,avg_cpu_percent,avg_mem_percent,peak_rss_bytes,batches,items
//! ```

use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::pipeline::{run_pipeline, PipelineError, PipelineGraph, SampleSource};
use crate::sys;

pub const REPORT_VERSION: u32 = 1;
pub const SEED_ENV: &str = "PCPIPE_SEED";

/// `PCPIPE_SEED` as a base seed, when set and numeric.
pub fn seed_from_env() -> Option<u64> {
    std::env::var(SEED_ENV).ok()?.trim().parse().ok()
}

/// `graph` with its base seed replaced by `PCPIPE_SEED` when set.
pub fn with_env_seed(graph: &PipelineGraph) -> PipelineGraph {
    let mut g = graph.clone();
    if let Some(seed) = seed_from_env() {
        g.base_seed = seed;
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub repeats: usize,
    pub sample_interval: Duration,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repeats: 1,
            sample_interval: Duration::from_millis(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Wall time from the end of the first batch to the end of the last.
    pub cost_time_s: f64,
    pub avg_cpu_percent: f64,
    /// Resident memory relative to total system memory.
    pub avg_mem_percent: f64,
    pub peak_rss_bytes: u64,
    pub batches: usize,
    pub items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub mean_s: f64,
    pub stddev_s: f64,
    /// `stddev_s / mean_s`.
    pub rate: f64,
}

impl Deviation {
    /// Population statistics of `times`; `None` for fewer than two.
    pub fn of(times: &[f64]) -> Option<Self> {
        if times.len() < 2 {
            return None;
        }
        let n = times.len() as f64;
        let mean_s = times.iter().sum::<f64>() / n;
        let stddev_s = (times.iter().map(|t| (t - mean_s).powi(2)).sum::<f64>() / n).sqrt();
        let rate = if mean_s > 0.0 { stddev_s / mean_s } else { 0.0 };
        Some(Self {
            mean_s,
            stddev_s,
            rate,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: u32,
    pub base_seed: u64,
    pub repeats: usize,
    /// Mean over runs.
    pub cost_time_s: f64,
    pub avg_cpu_percent: f64,
    pub avg_mem_percent: f64,
    pub peak_rss_bytes: u64,
    /// Per-batch throughput of the last run.
    pub items_per_sec: Vec<f64>,
    pub runs: Vec<RunSummary>,
    /// `None` when only one run was made.
    pub deviation: Option<Deviation>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "run,cost_time_s,avg_cpu_percent,avg_mem_percent,peak_rss_bytes,batches,items\n",
        );
        for (i, r) in self.runs.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{:.6},{:.2},{:.4},{},{},{}",
                r.cost_time_s,
                r.avg_cpu_percent,
                r.avg_mem_percent,
                r.peak_rss_bytes,
                r.batches,
                r.items
            );
        }
        out
    }
}

#[derive(Default)]
struct Usage {
    cpu: Vec<f64>,
    mem: Vec<f64>,
    peak_rss: u64,
}

fn sample_usage(interval: Duration, stop: Arc<AtomicBool>) -> thread::JoinHandle<Usage> {
    thread::spawn(move || {
        let total = sys::total_memory_bytes().max(1) as f64;
        let mut usage = Usage::default();
        let (mut cpu, mut at) = (sys::process_cpu_secs(), Instant::now());
        loop {
            thread::sleep(interval);
            let (now_cpu, now) = (sys::process_cpu_secs(), Instant::now());
            let wall = now.duration_since(at).as_secs_f64();
            if wall > 0.0 {
                usage.cpu.push(((now_cpu - cpu) / wall * 100.0).max(0.0));
            }
            let rss = sys::rss_bytes();
            usage.mem.push(rss as f64 / total * 100.0);
            usage.peak_rss = usage.peak_rss.max(rss);
            (cpu, at) = (now_cpu, now);
            if stop.load(Ordering::Relaxed) {
                return usage;
            }
        }
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs `graph` over `source` to completion `repeats` times.
pub fn run_benchmark(
    graph: &PipelineGraph,
    source: Arc<dyn SampleSource>,
    opts: &BenchOptions,
) -> Result<BenchReport, PipelineError> {
    if opts.repeats == 0 {
        return Err(PipelineError::OutOfBounds(
            "repeats must be positive".into(),
        ));
    }
    if opts.sample_interval.is_zero() {
        return Err(PipelineError::OutOfBounds(
            "sample interval must be positive".into(),
        ));
    }
    let mut runs = Vec::with_capacity(opts.repeats);
    let mut items_per_sec = Vec::new();
    for _ in 0..opts.repeats {
        let stop = Arc::new(AtomicBool::new(false));
        let sampler = sample_usage(opts.sample_interval, stop.clone());
        let handle = run_pipeline(graph, source.clone())?;
        let (mut batches, mut items) = (0, 0);
        let mut started = None;
        while let Some(b) = handle.next_batch() {
            let b = b?;
            batches += 1;
            items += b.len();
            started.get_or_insert_with(Instant::now);
        }
        let cost_time_s = started.map_or(0.0, |s| s.elapsed().as_secs_f64());
        let stats = handle.finish();
        stop.store(true, Ordering::Relaxed);
        let usage = sampler.join().expect("sampler thread");
        let stats = stats?;
        items_per_sec = stats.batches.iter().map(|b| b.items_per_sec).collect();
        runs.push(RunSummary {
            cost_time_s,
            avg_cpu_percent: mean(&usage.cpu),
            avg_mem_percent: mean(&usage.mem),
            peak_rss_bytes: usage.peak_rss,
            batches,
            items,
        });
    }
    let times: Vec<f64> = runs.iter().map(|r| r.cost_time_s).collect();
    Ok(BenchReport {
        version: REPORT_VERSION,
        base_seed: graph.base_seed,
        repeats: opts.repeats,
        cost_time_s: mean(&times),
        avg_cpu_percent: mean(&runs.iter().map(|r| r.avg_cpu_percent).collect::<Vec<_>>()),
        avg_mem_percent: mean(&runs.iter().map(|r| r.avg_mem_percent).collect::<Vec<_>>()),
        peak_rss_bytes: runs.iter().map(|r| r.peak_rss_bytes).max().unwrap_or(0),
        items_per_sec,
        deviation: Deviation::of(&times),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deviation_of_known_values() {
        assert_eq!(Deviation::of(&[1.0]), None);
        let d = Deviation::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert_eq!(d.mean_s, 5.0);
        assert_eq!(d.stddev_s, 2.0);
        assert_eq!(d.rate, 0.4);
    }
}
