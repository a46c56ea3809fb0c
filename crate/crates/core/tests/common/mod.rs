#![allow(dead_code)]

use pcpipe::format::{FieldKind, FieldType, Sample, Schema, Value};
use rand::seq::IndexedRandom;
use rand::Rng;

pub const KINDS: [FieldKind; 6] = [
    FieldKind::Bytes,
    FieldKind::Int32,
    FieldKind::Int64,
    FieldKind::Float32,
    FieldKind::Float64,
    FieldKind::String,
];

pub fn random_schema(rng: &mut impl Rng) -> Schema {
    let n = rng.random_range(1..=6);
    let mut schema = Schema::new();
    for i in 0..n {
        let kind = *KINDS.choose(rng).unwrap();
        let shape = match kind {
            FieldKind::String => vec![],
            _ => (0..rng.random_range(0..=2))
                .map(|_| rng.random_range(1..=4))
                .collect(),
        };
        schema = schema.with(format!("f{i}"), FieldType::tensor(kind, shape));
    }
    schema
}

pub fn random_sample(schema: &Schema, rng: &mut impl Rng) -> Sample {
    let mut s = Sample::new();
    for f in &schema.fields {
        let n = f.ty.elements();
        let v = match f.ty.kind {
            FieldKind::Bytes => {
                let rows = rng.random_range(0..20);
                let mut b = vec![0u8; rows * n.max(1) * if f.ty.shape.is_empty() { 1 } else { 4 }];
                if rng.random_bool(0.5) {
                    rng.fill_bytes(&mut b);
                } else {
                    // smooth float rows, the common case for coordinates
                    let base: f32 = rng.random();
                    for (i, c) in b.chunks_exact_mut(4).enumerate() {
                        c.copy_from_slice(&(base + i as f32 * 1e-3).to_le_bytes());
                    }
                }
                Value::Bytes(b)
            }
            FieldKind::Int32 => Value::Int32((0..n).map(|_| rng.random()).collect()),
            FieldKind::Int64 => Value::Int64((0..n).map(|_| rng.random()).collect()),
            FieldKind::Float32 => {
                Value::Float32((0..n).map(|_| f32::from_bits(rng.random())).collect())
            }
            FieldKind::Float64 => {
                Value::Float64((0..n).map(|_| f64::from_bits(rng.random())).collect())
            }
            FieldKind::String => {
                let len = rng.random_range(0..12);
                Value::Str((0..len).map(|_| rng.random_range('a'..='z')).collect())
            }
        };
        s.insert(f.name.clone(), v);
    }
    s
}

/// Point-cloud samples with an `id` field so order can be checked.
pub fn cloud_schema() -> Schema {
    Schema::new()
        .with("data", FieldType::tensor(FieldKind::Bytes, vec![3]))
        .with("id", FieldType::scalar(FieldKind::Int64))
}

pub fn cloud_sample(id: i64, points: usize) -> Sample {
    let mut coords = Vec::with_capacity(points * 3);
    for p in 0..points {
        let t = p as f32 / points as f32 * std::f32::consts::TAU;
        coords.extend_from_slice(&[t.cos() + id as f32 * 0.01, t.sin(), 0.1 * (id % 7) as f32]);
    }
    Sample::new()
        .with("data", Value::Bytes(pcpipe::format::f32s_to_le(&coords)))
        .with("id", Value::Int64(vec![id]))
}

pub fn sample_id(s: &Sample) -> i64 {
    match s.get("id") {
        Some(Value::Int64(v)) => v[0],
        other => panic!("no id field: {other:?}"),
    }
}

/// Writes `n` cloud samples and returns the opened dataset with its index.
pub fn cloud_dataset(
    dir: &std::path::Path,
    n: usize,
    slice_count: usize,
    group_size: usize,
) -> (
    std::sync::Arc<pcpipe::format::DatasetReader>,
    pcpipe::index::IndexTable,
) {
    let opts = pcpipe::format::WriteOptions {
        slice_count,
        group_size,
        stem: "cloud".into(),
    };
    pcpipe::format::write_dataset(
        (0..n as i64).map(|i| cloud_sample(i, 24)),
        &cloud_schema(),
        &opts,
        dir,
    )
    .unwrap();
    let reader = pcpipe::format::DatasetReader::open(dir).unwrap();
    let index = pcpipe::index::build_index(&reader.headers()).unwrap();
    (std::sync::Arc::new(reader), index)
}

/// The batch a sequential loop over `data` produces at `(epoch, batch_index)`.
/// Latency and busy-work steps are skipped; they never touch the sample.
pub fn reference_batch(
    graph: &pcpipe::pipeline::PipelineGraph,
    data: &[Sample],
    epoch: u32,
    batch_index: u64,
) -> pcpipe::pipeline::Batch {
    use pcpipe::pipeline::{apply_map, sample_seed, OpKind, Transform};
    let bs = graph.batch_size() as u64;
    let positions: Vec<u64> =
        (batch_index * bs..((batch_index + 1) * bs).min(data.len() as u64)).collect();
    let samples = positions
        .iter()
        .map(|&pos| {
            let mut s = data[pos as usize].clone();
            for op in graph.ops.iter().filter(|o| o.kind == OpKind::Map) {
                for step in &op.steps {
                    if matches!(
                        step.transform,
                        Transform::Sleep { .. } | Transform::Busy { .. }
                    ) {
                        continue;
                    }
                    let seed = sample_seed(graph.base_seed, epoch, pos, &step.op_id);
                    s = apply_map(&step.transform, &graph.fields, s, seed).unwrap();
                }
            }
            s
        })
        .collect();
    pcpipe::pipeline::Batch {
        epoch,
        batch_index,
        positions,
        samples,
    }
}
