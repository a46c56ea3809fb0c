mod common;

use std::sync::Arc;
use std::time::Duration;

use pcpipe::bench::*;
use pcpipe::pipeline::{IndexSource, MemorySource, PipelineGraph, Transform};

use common::{cloud_dataset, cloud_sample};

fn graph() -> PipelineGraph {
    PipelineGraph::new(4)
        .source(2, 4)
        .map("norm", Transform::Normalize, 2, 4)
        .map(
            "jitter",
            Transform::Jitter {
                sigma: 0.01,
                clip: 0.05,
            },
            2,
            4,
        )
        .batch(8)
        .sink(2)
}

#[test]
fn single_run_has_no_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let (reader, index) = cloud_dataset(dir.path(), 100, 2, 16);
    let source = Arc::new(IndexSource::new(reader, index.entries().to_vec()));
    let report = run_benchmark(
        &graph(),
        source,
        &BenchOptions {
            repeats: 1,
            sample_interval: Duration::from_millis(1),
        },
    )
    .unwrap();
    assert_eq!(report.deviation, None);
    assert_eq!(report.runs.len(), 1);
    assert_eq!(report.runs[0].batches, 12);
    assert_eq!(report.runs[0].items, 96);
    assert_eq!(report.items_per_sec.len(), 12);
    assert!(report.avg_cpu_percent >= 0.0);
    assert!(report.avg_mem_percent > 0.0 && report.avg_mem_percent < 100.0);
    assert!(report.peak_rss_bytes > 0);

    let json: serde_json::Value = serde_json::to_value(&report).unwrap();
    assert!(json["deviation"].is_null());
    assert_eq!(json["version"], 1);
}

#[test]
fn repeated_runs_differ_only_in_timing() {
    let data: Vec<_> = (0..64).map(|i| cloud_sample(i, 32)).collect();
    let opts = BenchOptions {
        repeats: 3,
        sample_interval: Duration::from_millis(2),
    };
    let report = run_benchmark(&graph(), Arc::new(MemorySource(data)), &opts).unwrap();
    let dev = report.deviation.clone().unwrap();
    assert!(dev.rate >= 0.0 && dev.mean_s > 0.0);
    assert!(report.runs.iter().all(|r| r.batches == 8 && r.items == 64));

    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("run,cost_time_s,avg_cpu_percent,avg_mem_percent,peak_rss_bytes,batches,items")
    );
    assert_eq!(lines.count(), 3);
}

#[test]
fn rejects_bad_options_and_honors_seed_env() {
    let source = Arc::new(MemorySource(vec![cloud_sample(0, 8)]));
    let g = PipelineGraph::new(1).source(1, 1).batch(1).sink(1);
    assert!(run_benchmark(
        &g,
        source.clone(),
        &BenchOptions {
            repeats: 0,
            ..Default::default()
        }
    )
    .is_err());
    assert!(run_benchmark(
        &g,
        source,
        &BenchOptions {
            repeats: 1,
            sample_interval: Duration::ZERO
        }
    )
    .is_err());

    std::env::set_var(SEED_ENV, "99");
    assert_eq!(with_env_seed(&g).base_seed, 99);
    std::env::set_var(SEED_ENV, "not a number");
    assert_eq!(with_env_seed(&g).base_seed, 1);
    std::env::remove_var(SEED_ENV);
}
