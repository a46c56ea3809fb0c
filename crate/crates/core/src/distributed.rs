//! Index sharding and a simulated data-parallel training loop.
//!
//! Devices are threads in one process. Each device runs its own pipeline
//! over a strided shard of the padded index, computes a gradient of a toy
//! linear model on its local batch, and meets the others at a barrier where
//! device 0 averages the gradients in device order and broadcasts the result.
//!
//! # Toy model
//!
//! For a sample with point cloud `P` and label `y`, the feature vector has
//! one entry per parameter: `f[k]` is the mean of coordinate `k mod 3` over
//! `P`, snapped to a 2^-10 grid and clamped to `[-4, 4]`. The per-sample
//! gradient term is the least-squares gradient
//!
//! ```text
//! t[k] = q(f[k] * (f . params - y))
//! ```
//!
//! where `q` snaps to a 2^-16 grid and clamps to `[-2^20, 2^20]`. A device
//! gradient is the sum of its terms divided by the local batch size, and the
//! update is `params <- params - lr * mean_d(g_d)`.
//!
//! Every term is a dyadic rational small enough that all partial sums are
//! exact in `f64`. When the device count and the local batch size are both
//! powers of two the divisions are exact as well, so the averaged gradient
//! does not depend on how the global batch was split and a 4-device run
//! reproduces a 1-device run bit for bit.

use std::sync::{Arc, Barrier, Mutex};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{f32s_from_le, DatasetReader, Sample, Value};
use crate::index::{IndexTable, TaskType};
use crate::pipeline::{run_pipeline, IndexSource, OpKind, PipelineError, PipelineGraph};

#[derive(Debug, Error)]
pub enum DistributedError {
    #[error("invalid shard spec: shard {shard_id} of {num_shards}")]
    InvalidSpec { num_shards: usize, shard_id: usize },
    #[error("index of length {len} is not padded for {num_shards} shards")]
    NotPadded { len: usize, num_shards: usize },
    #[error("gradient {index} has length {got}, expected {expected}")]
    ShapeMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("no gradients to reduce")]
    Empty,
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("device {device}: {source}")]
    Device {
        device: usize,
        source: PipelineError,
    },
    #[error("device {device} ran out of batches at step {step}")]
    ShortShard { device: usize, step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardSpec {
    pub num_shards: usize,
    pub shard_id: usize,
}

impl ShardSpec {
    pub fn new(num_shards: usize, shard_id: usize) -> Result<Self, DistributedError> {
        if num_shards == 0 || shard_id >= num_shards {
            return Err(DistributedError::InvalidSpec {
                num_shards,
                shard_id,
            });
        }
        Ok(Self {
            num_shards,
            shard_id,
        })
    }

    /// The whole dataset as a single shard.
    pub fn single() -> Self {
        Self {
            num_shards: 1,
            shard_id: 0,
        }
    }
}

/// Entries `shard_id, shard_id + N, shard_id + 2N, ...` of a padded index.
pub fn shard_index(index: &IndexTable, spec: ShardSpec) -> Result<IndexTable, DistributedError> {
    let spec = ShardSpec::new(spec.num_shards, spec.shard_id)?;
    if !index.len().is_multiple_of(spec.num_shards) {
        return Err(DistributedError::NotPadded {
            len: index.len(),
            num_shards: spec.num_shards,
        });
    }
    let entries: Vec<_> = index
        .entries()
        .iter()
        .skip(spec.shard_id)
        .step_by(spec.num_shards)
        .cloned()
        .collect();
    Ok(IndexTable {
        task_list: entries.iter().map(|e| e.task).collect(),
        total_real_samples: entries
            .iter()
            .filter(|e| e.task == TaskType::Common)
            .count(),
        sample_meta_list: entries,
    })
}

/// Elementwise mean, summed in slice order.
pub fn allreduce_mean(grads: &[Vec<f64>]) -> Result<Vec<f64>, DistributedError> {
    let first = grads.first().ok_or(DistributedError::Empty)?;
    let mut sum = vec![0.0; first.len()];
    for (i, g) in grads.iter().enumerate() {
        if g.len() != sum.len() {
            return Err(DistributedError::ShapeMismatch {
                index: i,
                expected: sum.len(),
                got: g.len(),
            });
        }
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    let n = grads.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub params: Vec<f64>,
    pub learning_rate: f64,
}

impl ToyModel {
    pub fn new(params: Vec<f64>, learning_rate: f64) -> Self {
        Self {
            params,
            learning_rate,
        }
    }

    /// Deterministic initial parameters in `[-0.5, 0.5)`.
    pub fn seeded(dim: usize, learning_rate: f64, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = (0..dim)
            .map(|_| snap(rng.random::<f64>() - 0.5, 16.0))
            .collect();
        Self {
            params,
            learning_rate,
        }
    }
}

const TERM_LIMIT: f64 = (1u64 << 20) as f64;

fn snap(v: f64, bits: f64) -> f64 {
    let scale = bits.exp2();
    (v * scale).round() / scale
}

/// Feature vector of `sample` for a model with `dim` parameters.
pub fn toy_features(sample: &Sample, points_field: &str, dim: usize) -> Vec<f64> {
    let mut mean = [0.0f64; 3];
    if let Some(Value::Bytes(b)) = sample.get(points_field) {
        let xs = f32s_from_le(b);
        let n = xs.len() / 3;
        if n > 0 {
            for p in xs.chunks_exact(3) {
                for k in 0..3 {
                    mean[k] += p[k] as f64;
                }
            }
            for m in &mut mean {
                *m /= n as f64;
            }
        }
    }
    (0..dim)
        .map(|k| snap(mean[k % 3], 10.0).clamp(-4.0, 4.0))
        .collect()
}

fn toy_target(sample: &Sample, label_field: &str) -> f64 {
    match sample.get(label_field) {
        Some(Value::Int32(v)) if !v.is_empty() => (v[0].rem_euclid(16)) as f64 / 16.0,
        Some(Value::Int64(v)) if !v.is_empty() => (v[0].rem_euclid(16)) as f64 / 16.0,
        _ => 0.0,
    }
}

/// Sum of quantized per-sample gradient terms.
pub fn toy_gradient_sum(
    params: &[f64],
    samples: &[Sample],
    points_field: &str,
    label_field: &str,
) -> Vec<f64> {
    let mut sum = vec![0.0; params.len()];
    for s in samples {
        let f = toy_features(s, points_field, params.len());
        let residual =
            f.iter().zip(params).map(|(a, b)| a * b).sum::<f64>() - toy_target(s, label_field);
        for (acc, fk) in sum.iter_mut().zip(&f) {
            *acc += snap(fk * residual, 16.0).clamp(-TERM_LIMIT, TERM_LIMIT);
        }
    }
    sum
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub num_devices: usize,
    pub epochs: u32,
    /// Samples per optimizer step across all devices.
    pub global_batch: usize,
    pub model: ToyModel,
    /// Per-device pipeline; its batch size is replaced by the local batch.
    pub graph: PipelineGraph,
    pub points_field: String,
    pub label_field: String,
}

impl SimulationConfig {
    pub fn new(
        num_devices: usize,
        global_batch: usize,
        model: ToyModel,
        graph: PipelineGraph,
    ) -> Self {
        Self {
            num_devices,
            epochs: 1,
            global_batch,
            model,
            graph,
            points_field: "data".into(),
            label_field: "label".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTiming {
    pub epoch: u32,
    pub step: usize,
    pub secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceReport {
    pub device: usize,
    pub shard_len: usize,
    pub padded_tasks: usize,
    pub params: Vec<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub num_devices: usize,
    pub global_batch: usize,
    pub local_batch: usize,
    pub epochs: u32,
    pub steps: usize,
    pub params: Vec<f64>,
    pub params_hash: String,
    /// Largest `max_k |params_d[k] - params_0[k]|` seen after any step.
    pub max_replica_divergence: f64,
    pub step_timings: Vec<StepTiming>,
    pub devices: Vec<DeviceReport>,
    pub wall_secs: f64,
}

/// FNV-1a over the little-endian bits of `params`.
pub fn params_hash(params: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in params.iter().flat_map(|p| p.to_bits().to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

struct Exchange {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<Vec<f64>>,
    mean: Vec<f64>,
    failure: Option<DistributedError>,
    divergence: f64,
    timings: Vec<StepTiming>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// Runs the data-parallel loop over `index`, which must already be padded
/// for `cfg.num_devices`.
pub fn simulate_data_parallel(
    reader: Arc<DatasetReader>,
    index: &IndexTable,
    cfg: &SimulationConfig,
) -> Result<SimulationReport, DistributedError> {
    let n = cfg.num_devices;
    if n == 0 || cfg.global_batch == 0 || !cfg.global_batch.is_multiple_of(n) {
        return Err(DistributedError::InvalidConfig(format!(
            "global batch {} must be a positive multiple of {} devices",
            cfg.global_batch, n
        )));
    }
    if cfg.model.params.iter().any(|p| !p.is_finite()) || !cfg.model.learning_rate.is_finite() {
        return Err(DistributedError::InvalidConfig(
            "model has non-finite values".into(),
        ));
    }
    let local_batch = cfg.global_batch / n;
    let shards = (0..n)
        .map(|d| {
            shard_index(
                index,
                ShardSpec {
                    num_shards: n,
                    shard_id: d,
                },
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let steps_per_epoch = shards[0].len() / local_batch;
    let mut graph = cfg
        .graph
        .clone()
        .validated()
        .map_err(|e| DistributedError::InvalidConfig(e.to_string()))?;
    graph.epochs = cfg.epochs;
    graph.keep_remainder = false;
    for op in graph.ops.iter_mut().filter(|o| o.kind == OpKind::Batch) {
        op.batch_size = Some(local_batch);
    }

    let started = Instant::now();
    let barrier = Arc::new(Barrier::new(n));
    let exchange = Arc::new(Mutex::new(Exchange {
        grads: vec![None; n],
        params: vec![cfg.model.params.clone(); n],
        mean: Vec::new(),
        failure: None,
        divergence: 0.0,
        timings: Vec::new(),
    }));
    let total_steps = steps_per_epoch * cfg.epochs as usize;

    let reports = thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .enumerate()
            .map(|(d, shard)| {
                let barrier = barrier.clone();
                let exchange = exchange.clone();
                let reader = reader.clone();
                let graph = &graph;
                // broadcast: every replica starts from device 0's parameters
                let mut params = cfg.model.params.clone();
                scope.spawn(move || {
                    let t0 = Instant::now();
                    let source = Arc::new(IndexSource::new(reader, shard.entries().to_vec()));
                    let mut pipeline = Some(run_pipeline(graph, source));
                    for step in 0..total_steps {
                        let step_start = Instant::now();
                        let local = match pipeline.as_mut() {
                            Some(Ok(h)) => match h.next_batch() {
                                Some(Ok(b)) => Ok(b),
                                Some(Err(e)) => Err(DistributedError::Device {
                                    device: d,
                                    source: e,
                                }),
                                None => Err(DistributedError::ShortShard { device: d, step }),
                            },
                            Some(Err(_)) => match pipeline.take() {
                                Some(Err(e)) => Err(DistributedError::Device {
                                    device: d,
                                    source: e,
                                }),
                                _ => unreachable!(),
                            },
                            None => Err(DistributedError::ShortShard { device: d, step }),
                        };
                        {
                            let mut ex = lock(&exchange);
                            match local {
                                Ok(batch) => {
                                    let sum = toy_gradient_sum(
                                        &params,
                                        &batch.samples,
                                        &cfg.points_field,
                                        &cfg.label_field,
                                    );
                                    let b = batch.samples.len() as f64;
                                    ex.grads[d] = Some(sum.into_iter().map(|s| s / b).collect());
                                }
                                Err(e) => {
                                    ex.failure.get_or_insert(e);
                                }
                            }
                        }
                        barrier.wait();
                        if d == 0 {
                            let mut ex = lock(&exchange);
                            if ex.failure.is_none() {
                                let grads: Vec<Vec<f64>> = ex
                                    .grads
                                    .iter_mut()
                                    .map(|g| g.take().unwrap_or_default())
                                    .collect();
                                match allreduce_mean(&grads) {
                                    Ok(m) => ex.mean = m,
                                    Err(e) => ex.failure = Some(e),
                                }
                            }
                        }
                        barrier.wait();
                        let mean = {
                            let ex = lock(&exchange);
                            if ex.failure.is_some() {
                                break;
                            }
                            ex.mean.clone()
                        };
                        for (p, g) in params.iter_mut().zip(&mean) {
                            *p -= cfg.model.learning_rate * g;
                        }
                        lock(&exchange).params[d] = params.clone();
                        barrier.wait();
                        if d == 0 {
                            let mut ex = lock(&exchange);
                            let div = ex
                                .params
                                .iter()
                                .flat_map(|p| {
                                    p.iter().zip(&ex.params[0]).map(|(a, b)| (a - b).abs())
                                })
                                .fold(0.0, f64::max);
                            ex.divergence = ex.divergence.max(div);
                            let epoch = (step / steps_per_epoch.max(1)) as u32;
                            ex.timings.push(StepTiming {
                                epoch,
                                step,
                                secs: step_start.elapsed().as_secs_f64(),
                            });
                        }
                    }
                    drop(pipeline);
                    DeviceReport {
                        device: d,
                        shard_len: shard.len(),
                        padded_tasks: shard.len() - shard.total_real_samples,
                        params,
                        wall_secs: t0.elapsed().as_secs_f64(),
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("device thread panicked"))
            .collect::<Vec<_>>()
    });

    let ex = Arc::try_unwrap(exchange)
        .map_err(|_| DistributedError::InvalidConfig("exchange still shared".into()))?
        .into_inner()
        .unwrap_or_else(|p| p.into_inner());
    if let Some(e) = ex.failure {
        return Err(e);
    }
    let params = reports[0].params.clone();
    Ok(SimulationReport {
        num_devices: n,
        global_batch: cfg.global_batch,
        local_batch,
        epochs: cfg.epochs,
        steps: total_steps,
        params_hash: params_hash(&params),
        params,
        max_replica_divergence: ex.divergence,
        step_timings: ex.timings,
        devices: reports,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_two() {
        assert_eq!(allreduce_mean(&[vec![2.0], vec![4.0]]).unwrap(), vec![3.0]);
        assert_eq!(allreduce_mean(&[vec![1.5, -2.0]]).unwrap(), vec![1.5, -2.0]);
        assert!(matches!(allreduce_mean(&[]), Err(DistributedError::Empty)));
        assert!(matches!(
            allreduce_mean(&[vec![1.0], vec![1.0, 2.0]]),
            Err(DistributedError::ShapeMismatch {
                index: 1,
                expected: 1,
                got: 2
            })
        ));
    }

    #[test]
    fn spec_bounds() {
        assert!(ShardSpec::new(0, 0).is_err());
        assert!(ShardSpec::new(4, 4).is_err());
        assert!(ShardSpec::new(4, 3).is_ok());
    }

    #[test]
    fn hash_is_bit_sensitive() {
        assert_eq!(params_hash(&[1.0, 2.0]), params_hash(&[1.0, 2.0]));
        assert_ne!(params_hash(&[0.0]), params_hash(&[-0.0]));
    }
}
