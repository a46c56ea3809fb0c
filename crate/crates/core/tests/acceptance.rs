//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when a criterion whose preconditions hold has failed.

mod common;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use pcpipe::autotune::{
    maximize, tune_live, SearchSpace, TuneConfig, TuneOptions, QUEUE_CAPACITIES,
};
use pcpipe::bench::{run_benchmark, BenchOptions};
use pcpipe::distributed::{
    shard_index, simulate_data_parallel, ShardSpec, SimulationConfig, ToyModel,
};
use pcpipe::format::{
    write_dataset, DatasetReader, FieldKind, FieldType, Sample, Schema, WriteOptions,
};
use pcpipe::index::{build_index, pad_for_shards, TaskType};
use pcpipe::ingest::{convert, synth, ConvertOptions, SourceKind};
use pcpipe::pipeline::{
    apply_map, collect_batches, run_pipeline, FieldNames, IndexSource, MemorySource, OpKind,
    PipelineGraph, SampleSource, Transform,
};
use pcpipe::streaming::{
    fetch_meta_index, stream_dataset, DiskBudget, LocalDirStore, ObjectStore, StoreServer,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{cloud_dataset, cloud_sample, random_sample, random_schema, reference_batch};

enum Verdict {
    Pass,
    Fail,
    /// Failed, but the machine does not meet the criterion's precondition.
    Unmet(String),
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn check(ok: bool, detail: String) -> Outcome {
    Outcome {
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        detail,
    }
}

fn within(started: Instant, limit_s: f64) -> (bool, String) {
    let s = started.elapsed().as_secs_f64();
    (s < limit_s, format!("{s:.1}s/<{limit_s:.0}s"))
}

fn format_round_trip() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut kinds = BTreeSet::new();
    for _ in 0..1000 {
        let schema = random_schema(&mut rng);
        kinds.extend(schema.fields.iter().map(|f| format!("{:?}", f.ty.kind)));
        let n = rng.random_range(1..40);
        let samples: Vec<Sample> = (0..n).map(|_| random_sample(&schema, &mut rng)).collect();
        let opts = WriteOptions {
            slice_count: rng.random_range(1..=4),
            group_size: rng.random_range(1..=257),
            stem: "r".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(samples.clone(), &schema, &opts, dir.path()).unwrap();
        let reader = DatasetReader::open(dir.path()).unwrap();
        let index = build_index(&reader.headers()).unwrap();
        let back: Vec<Sample> = index
            .entries()
            .iter()
            .map(|e| reader.read_sample(e).unwrap())
            .collect();
        if back != samples {
            mismatches += 1;
        }
    }
    let (fast, time) = within(started, 60.0);
    check(
        mismatches == 0 && kinds.len() == 6 && fast,
        format!(
            "1000 streams, {mismatches} mismatches, {} field kinds, {time}",
            kinds.len()
        ),
    )
}

fn compression() -> Outcome {
    let started = Instant::now();
    let xyz_src = tempfile::tempdir().unwrap();
    synth::write_xyz_corpus(
        xyz_src.path(),
        &["airplane", "chair", "lamp", "table"],
        1024,
        1 << 20,
    )
    .unwrap();
    let out = tempfile::tempdir().unwrap();
    let xyz = convert(
        xyz_src.path(),
        &Schema::modelnet40(),
        &ConvertOptions::new(SourceKind::XyzText),
        out.path(),
    )
    .unwrap()
    .report;

    let kitti_src = tempfile::tempdir().unwrap();
    synth::write_kitti_corpus(kitti_src.path(), 32, 512, 1 << 20).unwrap();
    let kitti_schema = Schema::new()
        .with("data", FieldType::tensor(FieldKind::Bytes, vec![3]))
        .with("intensity", FieldType::tensor(FieldKind::Bytes, vec![1]));
    let out = tempfile::tempdir().unwrap();
    let kitti = convert(
        kitti_src.path(),
        &kitti_schema,
        &ConvertOptions::new(SourceKind::KittiBin),
        out.path(),
    )
    .unwrap()
    .report;
    let (fast, time) = within(started, 30.0);
    check(
        xyz.ratio >= 4.0 && kitti.ratio >= 1.1 && fast,
        format!(
            "xyz {:.2}x (>= 4.0, {} KiB in), kitti {:.2}x (>= 1.1, {} KiB in), {time}",
            xyz.ratio,
            xyz.input_bytes / 1024,
            kitti.ratio,
            kitti.input_bytes / 1024
        ),
    )
}

const AUGMENTS: [Transform; 6] = [
    Transform::Normalize,
    Transform::Translate { range: 0.2 },
    Transform::Jitter {
        sigma: 0.01,
        clip: 0.05,
    },
    Transform::Rotate { angle: None },
    Transform::RandomScale {
        low: 0.8,
        high: 1.25,
    },
    Transform::FlipYz { p: 0.5 },
];

fn order_preservation() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (reader, index) = cloud_dataset(dir.path(), 1000, 3, 64);
    let data: Vec<Sample> = (0..1000).map(|i| cloud_sample(i, 24)).collect();
    let source: Arc<dyn SampleSource> =
        Arc::new(IndexSource::new(reader, index.entries().to_vec()));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = 0;
    for case in 0..200 {
        let cap = |rng: &mut ChaCha8Rng| *[1usize, 2, 8].choose(rng).unwrap();
        let mut g = PipelineGraph::new(case).source(rng.random_range(1..=8), cap(&mut rng));
        for m in 0..rng.random_range(0..=3) {
            let t = AUGMENTS.choose(&mut rng).unwrap().clone();
            g = g.map(&format!("m{m}"), t, rng.random_range(1..=8), cap(&mut rng));
        }
        let g = g.batch(rng.random_range(1..=64)).sink(cap(&mut rng));
        let (batches, _) = collect_batches(&g, source.clone()).unwrap();
        let expected = (1000 / g.batch_size()) as u64;
        let ok = batches.len() as u64 == expected
            && batches
                .iter()
                .enumerate()
                .all(|(k, b)| *b == reference_batch(&g, &data, 0, k as u64));
        if !ok {
            failures += 1;
        }
    }
    let (fast, time) = within(started, 120.0);
    check(
        failures == 0 && fast,
        format!("200 configurations, {failures} differ from sequential order, {time}"),
    )
}

fn throughput(workers: usize, items: usize) -> f64 {
    let data: Vec<Sample> = (0..items as i64).map(|i| cloud_sample(i, 8)).collect();
    let g = PipelineGraph::new(0)
        .source(2, 8)
        .map("work", Transform::Busy { micros: 2000 }, workers, 8)
        .batch(8)
        .sink(4);
    let started = Instant::now();
    let (batches, _) = collect_batches(&g, Arc::new(MemorySource(data))).unwrap();
    batches.iter().map(|b| b.len()).sum::<usize>() as f64 / started.elapsed().as_secs_f64()
}

fn pipeline_scaling() -> Outcome {
    let started = Instant::now();
    let cores = pcpipe::sys::available_cores();
    let one = throughput(1, 240);
    let four = throughput(4, 240);
    let speedup = four / one;
    let (fast, time) = within(started, 60.0);
    let detail = format!("1 worker {one:.0}/s, 4 workers {four:.0}/s, speedup {speedup:.2}x (>= 2.0), {cores} cores, {time}");
    if speedup >= 2.0 && fast {
        return check(true, detail);
    }
    if cores < 4 {
        return Outcome {
            verdict: Verdict::Unmet(format!("needs >= 4 cores, machine has {cores}")),
            detail,
        };
    }
    check(false, detail)
}

fn distributed_consistency() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (_, index) = cloud_dataset(dir.path(), 10, 2, 4);
    let padded = pad_for_shards(&index, 4);
    let shards: Vec<_> = (0..4)
        .map(|k| shard_index(&padded, ShardSpec::new(4, k).unwrap()).unwrap())
        .collect();
    let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
    let padded_tasks = padded
        .task_list
        .iter()
        .filter(|t| **t == TaskType::Padded)
        .count();
    let mut covered: Vec<u64> = shards
        .iter()
        .flat_map(|s| s.entries().iter().map(|e| e.ordinal))
        .collect();
    covered.sort_unstable();
    let partition =
        sizes == [3, 3, 3, 3] && padded_tasks == 2 && covered == (0..12).collect::<Vec<_>>();

    let dir = tempfile::tempdir().unwrap();
    let (reader2, index2) = cloud_dataset(dir.path(), 125, 3, 16);
    let padded2 = pad_for_shards(&index2, 4);
    let graph = PipelineGraph::new(9)
        .source(2, 4)
        .map(
            "jitter",
            Transform::Jitter {
                sigma: 0.01,
                clip: 0.05,
            },
            2,
            4,
        )
        .map("rotate", Transform::Rotate { angle: None }, 1, 4)
        .batch(1)
        .sink(2);
    let config = |devices| {
        let mut c = SimulationConfig::new(devices, 16, ToyModel::seeded(6, 0.05, 4), graph.clone());
        c.epochs = 2;
        c.label_field = "id".into();
        c
    };
    let single = simulate_data_parallel(reader2.clone(), &padded2, &config(1)).unwrap();
    let four = simulate_data_parallel(reader2, &padded2, &config(4)).unwrap();
    let identical = single
        .params
        .iter()
        .map(|p| p.to_bits())
        .eq(four.params.iter().map(|p| p.to_bits()));
    let (fast, time) = within(started, 30.0);
    check(
        partition && identical && four.max_replica_divergence == 0.0 && fast,
        format!(
            "10/4 shards {sizes:?} with {padded_tasks} padded; {} steps, params {} vs {}, {time}",
            four.steps, single.params_hash, four.params_hash
        ),
    )
}

fn streaming() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (reader, index) = cloud_dataset(dir.path(), 400, 10, 8);
    let graph = PipelineGraph::new(3)
        .source(2, 4)
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
        .epochs(2);
    let (local, _) = collect_batches(
        &graph,
        Arc::new(IndexSource::new(reader, index.entries().to_vec())),
    )
    .unwrap();

    let server = StoreServer::start(dir.path(), "127.0.0.1:0").unwrap();
    let store: Arc<dyn ObjectStore> = Arc::new(pcpipe::streaming::HttpStore::new(&server.url()));
    let run = |store: Arc<dyn ObjectStore>, quota: u64| {
        let staging = tempfile::tempdir().unwrap();
        let handle = stream_dataset(
            store,
            DiskBudget::new(quota, staging.path()),
            ShardSpec::single(),
            &graph,
        )
        .unwrap();
        let mut batches = Vec::new();
        while let Some(b) = handle.next_batch() {
            batches.push(b.unwrap());
        }
        let (_, stats) = handle.finish().unwrap();
        (batches, stats)
    };
    let total = fetch_meta_index(&LocalDirStore::new(dir.path()))
        .unwrap()
        .total_bytes();
    let (roomy, _) = run(store.clone(), total * 4);
    let quota = total * 2 / 5;
    let (tight, stats) = run(store, quota);
    let bound = quota + stats.max_slice_bytes;
    let (fast, time) = within(started, 60.0);
    check(
        roomy == local && tight == local && stats.peak_staged_bytes <= bound && fast,
        format!(
            "{} batches equal: {}; quota {quota} B, peak staged {} B <= {bound} B, {} evictions, {time}",
            local.len(),
            roomy == local && tight == local,
            stats.peak_staged_bytes,
            stats.evictions
        ),
    )
}

fn autotune_efficacy() -> Outcome {
    let started = Instant::now();
    let data: Vec<Sample> = (0..64).map(|i| cloud_sample(i, 16)).collect();
    let graph = PipelineGraph::new(21)
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
        .map("bottleneck", Transform::Sleep { micros: 5000 }, 1, 2)
        .batch(4)
        .sink(2)
        .epochs(100_000);
    let per_epoch = (data.len() / graph.batch_size()) as u64;
    let (mut improved, mut order_ok) = (0, true);
    let mut ratios = Vec::new();
    for seed in 0..20 {
        let handle = run_pipeline(&graph, Arc::new(MemorySource(data.clone()))).unwrap();
        let mut seen = Vec::new();
        let opts = TuneOptions {
            iterations: 10,
            window: Duration::from_millis(120),
            max_workers: 8,
            seed,
            ..Default::default()
        };
        let report = tune_live(&handle, &opts, &mut |b| seen.push(b)).unwrap();
        drop(handle);
        let ratio = report.final_objective.unwrap() / report.initial_objective;
        ratios.push(ratio);
        if ratio >= 1.5 {
            improved += 1;
        }
        order_ok &= seen.iter().enumerate().all(|(k, b)| {
            let k = k as u64;
            b.epoch as u64 == k / per_epoch
                && b.batch_index == k % per_epoch
                && *b == reference_batch(&graph, &data, b.epoch, b.batch_index)
        });
    }
    ratios.sort_by(f64::total_cmp);
    let (fast, time) = within(started, 300.0);
    check(
        improved >= 18 && order_ok && fast,
        format!(
            "{improved}/20 trials >= 1.5x (median {:.2}x, min {:.2}x), order intact: {order_ok}, {time}",
            ratios[10], ratios[0]
        ),
    )
}

fn surrogate_sanity() -> Outcome {
    let started = Instant::now();
    let space = SearchSpace {
        ops: vec!["m".into()],
        max_workers: 16,
        capacities: QUEUE_CAPACITIES.to_vec(),
        fusable: vec![],
        memory_cap_bytes: None,
        item_bytes: 0,
    };
    let f = |c: &TuneConfig| -(c.ops["m"].workers as f64 - 4.0).powi(2);
    let values: Vec<f64> = space
        .enumerate()
        .iter()
        .map(|p| f(&space.decode(p)))
        .collect();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let mut passed = 0;
    for seed in 0..20 {
        let (best, _) = maximize(space.clone(), seed, 10, |c| Ok(f(c))).unwrap();
        if (best.objective.unwrap() - lo) / (hi - lo) >= 0.9 {
            passed += 1;
        }
    }
    let (fast, time) = within(started, 30.0);
    check(
        passed >= 18 && fast,
        format!("{passed}/20 seeds reach >= 90% of the optimum, {time}"),
    )
}

/// Deviation rate of the same read-and-transform work done in a plain loop,
/// i.e. the timing noise of the host itself. Measured before and after the
/// benchmark; the larger value counts.
fn sequential_noise(
    reader: &DatasetReader,
    index: &pcpipe::index::IndexTable,
    graph: &PipelineGraph,
) -> f64 {
    let fields = FieldNames::default();
    let times: Vec<f64> = (0..20)
        .map(|_| {
            let t = Instant::now();
            for e in index.entries() {
                let mut s = reader.read_sample(e).unwrap();
                for op in graph.ops.iter().filter(|o| o.kind == OpKind::Map) {
                    for step in &op.steps {
                        s = apply_map(&step.transform, &fields, s, 1).unwrap();
                    }
                }
                std::hint::black_box(&s);
            }
            t.elapsed().as_secs_f64()
        })
        .collect();
    pcpipe::bench::Deviation::of(&times).unwrap().rate
}

fn bench_stability() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (reader, index) = cloud_dataset(dir.path(), 2048, 2, 64);
    let graph = PipelineGraph::new(5)
        .source(1, 64)
        .map("normalize", Transform::Normalize, 1, 64)
        .map(
            "jitter",
            Transform::Jitter {
                sigma: 0.01,
                clip: 0.05,
            },
            1,
            64,
        )
        .batch(32)
        .sink(4);
    let before = sequential_noise(&reader, &index, &graph);
    let source = Arc::new(IndexSource::new(reader.clone(), index.entries().to_vec()));
    let report = run_benchmark(
        &graph,
        source,
        &BenchOptions {
            repeats: 20,
            sample_interval: Duration::from_millis(10),
        },
    )
    .unwrap();
    let dev = report.deviation.clone().unwrap();
    let (fast, time) = within(started, 180.0);
    let mut detail = format!(
        "mean {:.3}s, stddev {:.4}s, deviation rate {:.2}% (< 5%), {time}",
        dev.mean_s,
        dev.stddev_s,
        dev.rate * 100.0
    );
    if dev.rate < 0.05 {
        return check(fast, detail);
    }
    let noise = before.max(sequential_noise(&reader, &index, &graph));
    detail.push_str(&format!(", plain-loop baseline {:.2}%", noise * 100.0));
    if noise >= 0.05 {
        return Outcome {
            verdict: Verdict::Unmet(format!("host timing noise {:.1}% >= 5%", noise * 100.0)),
            detail,
        };
    }
    check(false, detail)
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("format round-trip", format_round_trip),
        ("compression ratio", compression),
        ("order preservation", order_preservation),
        ("pipeline scaling", pipeline_scaling),
        ("distributed consistency", distributed_consistency),
        ("streaming transparency and budget", streaming),
        ("autotune efficacy", autotune_efficacy),
        ("surrogate sanity", surrogate_sanity),
        ("benchmark stability", bench_stability),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = run();
        let line = match &outcome.verdict {
            Verdict::Pass => "PASS".to_string(),
            Verdict::Fail => {
                failed += 1;
                "FAIL".to_string()
            }
            Verdict::Unmet(why) => format!("FAIL (precondition not met: {why})"),
        };
        println!("{line} criterion {} {name}: {}", i + 1, outcome.detail);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
