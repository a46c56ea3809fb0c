mod common;

use std::sync::Arc;

use pcpipe::format::{write_dataset, DatasetReader, Sample, WriteOptions};
use pcpipe::index::build_index;
use pcpipe::pipeline::{
    apply_map, collect_batches, fuse_maps, run_pipeline, sample_seed, Batch, IndexSource,
    MemorySource, OpKind, PipelineError, PipelineGraph, Transform, TransformError,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{cloud_sample, sample_id};

fn samples(n: usize) -> Vec<Sample> {
    (0..n as i64).map(|i| cloud_sample(i, 16)).collect()
}

/// Single-threaded reference: every map step in graph order, same seeds,
/// full batches only (unless the graph keeps remainders).
fn sequential(graph: &PipelineGraph, data: &[Sample]) -> Vec<Batch> {
    let graph = graph.clone().validated().unwrap();
    let bs = graph.batch_size();
    let mut out = Vec::new();
    for epoch in 0..graph.epochs {
        let mut cur: Vec<(u64, Sample)> = Vec::new();
        for (pos, s) in data.iter().enumerate() {
            let mut s = s.clone();
            for op in graph.ops.iter().filter(|o| o.kind == OpKind::Map) {
                for step in &op.steps {
                    let seed = sample_seed(graph.base_seed, epoch, pos as u64, &step.op_id);
                    s = apply_map(&step.transform, &graph.fields, s, seed).unwrap();
                }
            }
            cur.push((pos as u64, s));
            if cur.len() == bs || (graph.keep_remainder && pos + 1 == data.len()) {
                out.push(Batch {
                    epoch,
                    batch_index: cur[0].0 / bs as u64,
                    positions: cur.iter().map(|c| c.0).collect(),
                    samples: cur.drain(..).map(|c| c.1).collect(),
                });
            }
        }
    }
    out
}

fn run(graph: &PipelineGraph, data: &[Sample]) -> Vec<Batch> {
    let (batches, stats) = collect_batches(graph, Arc::new(MemorySource(data.to_vec()))).unwrap();
    assert!(
        stats.max_inflight as usize <= stats.inflight_bound,
        "in-flight {} exceeds bound {}",
        stats.max_inflight,
        stats.inflight_bound
    );
    assert_eq!(stats.batches.len(), batches.len());
    batches
}

fn augmenting(workers: usize, cap: usize, seed: u64) -> PipelineGraph {
    PipelineGraph::new(seed)
        .source(workers, cap)
        .map("normalize", Transform::Normalize, workers, cap)
        .map(
            "jitter",
            Transform::Jitter {
                sigma: 0.01,
                clip: 0.05,
            },
            workers,
            cap,
        )
        .map("rotate", Transform::Rotate { angle: None }, workers, cap)
        .batch(4)
        .sink(2)
}

#[test]
fn ten_samples_two_batches() {
    let data = samples(10);
    let g = PipelineGraph::new(0)
        .source(1, 1)
        .map("n", Transform::Normalize, 1, 1)
        .batch(4)
        .sink(1);
    let batches = run(&g, &data);
    assert_eq!(batches.len(), 2);
    assert_eq!(batches[0].positions, vec![0, 1, 2, 3]);
    assert_eq!(batches[1].positions, vec![4, 5, 6, 7]);
}

#[test]
fn worker_count_does_not_change_output() {
    let data = samples(50);
    let reference = run(&augmenting(1, 2, 3), &data);
    assert_eq!(reference, sequential(&augmenting(1, 2, 3), &data));
    for w in [2, 4, 8] {
        assert_eq!(run(&augmenting(w, 2, 3), &data), reference, "workers {w}");
    }
}

#[test]
fn exhaustive_small_instances() {
    for n in [1usize, 2, 5, 9] {
        let data = samples(n);
        for bs in [1usize, 2, 4] {
            for (ws, wm) in [(1, 1), (1, 3), (2, 1), (3, 2), (4, 4)] {
                for cap in [1usize, 2, 8] {
                    let g = PipelineGraph::new(11)
                        .source(ws, cap)
                        .map("t", Transform::Translate { range: 0.2 }, wm, cap)
                        .batch(bs)
                        .sink(1);
                    let got = run(&g, &data);
                    assert_eq!(
                        got,
                        sequential(&g, &data),
                        "n={n} bs={bs} ws={ws} wm={wm} cap={cap}"
                    );
                    assert_eq!(got.len(), n / bs);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn random_graphs_preserve_order(seed in any::<u64>(), n in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let caps = [1usize, 2, 8];
        let mut g = PipelineGraph::new(seed).source(rng.random_range(1..=8), caps[rng.random_range(0..3)]);
        for m in 0..rng.random_range(0..4) {
            let t = match rng.random_range(0..4) {
                0 => Transform::Normalize,
                1 => Transform::Sleep { micros: rng.random_range(0..200) },
                2 => Transform::RandomScale { low: 0.8, high: 1.25 },
                _ => Transform::FlipYz { p: 0.5 },
            };
            g = g.map(&format!("m{m}"), t, rng.random_range(1..=8), caps[rng.random_range(0..3)]);
        }
        let g = g.batch(rng.random_range(1..=7)).sink(rng.random_range(1..=3)).epochs(rng.random_range(1..=2));
        let data = samples(n);
        let got = run(&g, &data);
        prop_assert_eq!(&got, &sequential(&g, &data));
        // no loss or duplication
        let bs = g.batch_size();
        let ids: Vec<i64> = got.iter().filter(|b| b.epoch == 0).flat_map(|b| b.samples.iter().map(sample_id)).collect();
        prop_assert_eq!(ids, (0..(n / bs * bs) as i64).collect::<Vec<_>>());
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let data = samples(40);
    let g = augmenting(3, 1, 99);
    assert_eq!(run(&g, &data), run(&g, &data));
    let other_seed = augmenting(3, 1, 100);
    assert_ne!(run(&other_seed, &data), run(&g, &data));
}

#[test]
fn epochs_drop_remainders_and_reseed() {
    let data = samples(10);
    let g = augmenting(2, 2, 5).epochs(3);
    let batches = run(&g, &data);
    assert_eq!(batches.len(), 6);
    assert_eq!(
        batches.iter().map(|b| b.epoch).collect::<Vec<_>>(),
        vec![0, 0, 1, 1, 2, 2]
    );
    assert_ne!(batches[0].samples, batches[2].samples);
    let mut keep = g.clone();
    keep.keep_remainder = true;
    let kept = run(&keep, &data);
    assert_eq!(kept.len(), 9);
    assert_eq!(kept[2].positions, vec![8, 9]);
    assert_eq!(kept, sequential(&keep, &data));
}

#[test]
fn fused_graph_matches_unfused() {
    let data = samples(30);
    let g = PipelineGraph::modelnet40_default(8);
    let mut small = g.clone();
    small.op_mut("batch").unwrap().batch_size = Some(4);
    let fused = fuse_maps(&small);
    assert_eq!(fused.ops.len(), 4);
    assert_eq!(run(&fused, &data), run(&small, &data));
}

#[test]
fn live_worker_change_keeps_stream() {
    let data = samples(400);
    let g = PipelineGraph::new(4)
        .source(1, 2)
        .map("slow", Transform::Sleep { micros: 300 }, 1, 2)
        .map(
            "jitter",
            Transform::Jitter {
                sigma: 0.01,
                clip: 0.05,
            },
            1,
            2,
        )
        .batch(8)
        .sink(2);
    let reference = sequential(&g, &data);
    let handle = run_pipeline(&g, Arc::new(MemorySource(data.clone()))).unwrap();
    let mut got = Vec::new();
    let changes = [
        (3, "slow", Some(4), None),
        (10, "jitter", Some(3), Some(1)),
        (20, "slow", Some(2), Some(16)),
        (25, "source", Some(5), None),
        (30, "slow", None, Some(1)),
        (35, "jitter", Some(1), None),
    ];
    while let Some(b) = handle.next_batch() {
        got.push(b.unwrap());
        for (at, op, w, c) in changes {
            if got.len() == at {
                handle.update_op_config(op, w, c).unwrap();
            }
        }
    }
    assert_eq!(handle.op_config("slow"), Some((2, 1)));
    assert_eq!(handle.op_config("jitter"), Some((1, 1)));
    assert_eq!(handle.op_config("source"), Some((5, 2)));
    handle.finish().unwrap();
    assert_eq!(got, reference);
}

#[test]
fn update_status_does_not_block_on_full_queues() {
    use std::time::Duration;
    let data = samples(64);
    let g = PipelineGraph::new(4)
        .source(1, 2)
        .map(
            "jitter",
            Transform::Jitter {
                sigma: 0.01,
                clip: 0.05,
            },
            1,
            2,
        )
        .map("slow", Transform::Sleep { micros: 200 }, 1, 2)
        .batch(4)
        .sink(2)
        .epochs(1000);
    let handle = Arc::new(run_pipeline(&g, Arc::new(MemorySource(data))).unwrap());
    for round in 0..30 {
        let workers = 1 + (round * 5) % 8;
        for op in ["source", "jitter", "slow"] {
            handle
                .update_op_config(op, Some(workers), Some(1 + round % 3))
                .unwrap();
        }
        handle.next_batch().unwrap().unwrap();
        std::thread::sleep(Duration::from_millis(10));
        let (tx, rx) = std::sync::mpsc::channel();
        let h = handle.clone();
        std::thread::spawn(move || tx.send(h.updates_applied()).unwrap());
        rx.recv_timeout(Duration::from_secs(5))
            .expect("updates_applied blocked");
    }
}

#[test]
fn update_validation() {
    let data = samples(8);
    let g = augmenting(1, 1, 0);
    let mut handle = run_pipeline(&g, Arc::new(MemorySource(data))).unwrap();
    assert!(matches!(
        handle.update_op_config("nope", Some(2), None),
        Err(PipelineError::UnknownOp(_))
    ));
    assert!(matches!(
        handle.update_op_config("rotate", None, Some(0)),
        Err(PipelineError::OutOfBounds(_))
    ));
    assert!(matches!(
        handle.update_op_config("rotate", Some(0), None),
        Err(PipelineError::OutOfBounds(_))
    ));
    assert!(matches!(
        handle.update_op_config("batch", Some(2), None),
        Err(PipelineError::OutOfBounds(_))
    ));
    handle.shutdown();
}

#[test]
fn transform_errors_name_the_op() {
    let data = vec![Sample::new().with("label", pcpipe::format::Value::Int32(vec![1])); 4];
    let g = PipelineGraph::new(0)
        .source(1, 1)
        .map("norm", Transform::Normalize, 2, 1)
        .batch(2)
        .sink(1);
    let err = collect_batches(&g, Arc::new(MemorySource(data))).unwrap_err();
    match err {
        PipelineError::Transform { op, source } => {
            assert_eq!(op, "norm");
            assert_eq!(source, TransformError::MissingField("data".into()));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn worker_panic_is_reported_with_op() {
    let g = PipelineGraph::new(0)
        .source(1, 1)
        .map(
            "bad_scale",
            Transform::RandomScale {
                low: 2.0,
                high: 1.0,
            },
            3,
            1,
        )
        .batch(2)
        .sink(1);
    let err = collect_batches(&g, Arc::new(MemorySource(samples(20)))).unwrap_err();
    assert!(
        matches!(err, PipelineError::WorkerPanic { ref op, .. } if op == "bad_scale"),
        "{err:?}"
    );
}

#[test]
fn reads_from_dataset_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(37);
    let opts = WriteOptions {
        slice_count: 3,
        group_size: 5,
        stem: "p".into(),
    };
    write_dataset(data.clone(), &common::cloud_schema(), &opts, dir.path()).unwrap();
    let reader = Arc::new(DatasetReader::open(dir.path()).unwrap());
    let index = build_index(&reader.headers()).unwrap();
    let src = Arc::new(IndexSource::new(reader, index.entries().to_vec()));
    let g = augmenting(3, 2, 1);
    let (batches, stats) = collect_batches(&g, src).unwrap();
    assert_eq!(batches, sequential(&g, &data));
    let csv = stats.to_csv();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with(
        "batch_index,epoch,items_per_sec,source_busy_fraction,source_queue_occupancy"
    ));
    assert_eq!(csv.lines().count(), 1 + batches.len());
    assert!(batches
        .iter()
        .all(|b| b.stack("data").unwrap().len() == 4 * 16 * 12));
}

#[test]
fn empty_polls_counted_when_consumer_outpaces_pipeline() {
    let g = PipelineGraph::new(0)
        .source(1, 1)
        .map("slow", Transform::Sleep { micros: 2000 }, 1, 1)
        .batch(1)
        .sink(4);
    let handle = run_pipeline(&g, Arc::new(MemorySource(samples(10)))).unwrap();
    while let Some(b) = handle.next_batch() {
        b.unwrap();
    }
    let snap = handle.snapshot();
    assert!(snap.sink_empty_polls >= 5, "{snap:?}");
    handle.finish().unwrap();
}
