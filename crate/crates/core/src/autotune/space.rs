use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AutotuneError;
use crate::pipeline::{fuse_pairs, OpKind, PipelineGraph};

pub const QUEUE_CAPACITIES: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpSetting {
    pub workers: usize,
    pub queue_capacity: usize,
}

/// One assignment of every search dimension, plus its measured objective.
/// This is also the on-disk format of the best configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub version: u32,
    pub ops: BTreeMap<String, OpSetting>,
    /// Adjacent map pairs `[first, second]` to fuse, by original op id.
    pub fused_pairs: Vec<[String; 2]>,
    /// Mean items/sec over the evaluation window.
    pub objective: Option<f64>,
    /// Seconds since the Unix epoch when the config was recorded.
    pub timestamp: Option<u64>,
}

impl TuneConfig {
    /// The settings currently in `graph`.
    pub fn from_graph(graph: &PipelineGraph) -> Self {
        Self {
            version: CONFIG_VERSION,
            ops: graph
                .tunable_ops()
                .map(|o| {
                    (
                        o.id.clone(),
                        OpSetting {
                            workers: o.num_workers,
                            queue_capacity: o.queue_capacity,
                        },
                    )
                })
                .collect(),
            fused_pairs: Vec::new(),
            objective: None,
            timestamp: None,
        }
    }

    /// Predicted bytes held by queues: every queue slot filled with an
    /// item of `item_bytes`.
    pub fn queue_bytes(&self, item_bytes: u64) -> u64 {
        self.ops
            .values()
            .map(|s| (s.workers * s.queue_capacity) as u64 * item_bytes)
            .sum()
    }
}

/// Adjacent map pairs of `graph`, in order.
pub fn map_pairs(graph: &PipelineGraph) -> Vec<[String; 2]> {
    graph
        .ops
        .windows(2)
        .filter(|w| w[0].kind == OpKind::Map && w[1].kind == OpKind::Map)
        .map(|w| [w[0].id.clone(), w[1].id.clone()])
        .collect()
}

/// Applies `cfg` to `graph`: per-op settings first, then fusion.
pub fn apply_config(
    graph: &PipelineGraph,
    cfg: &TuneConfig,
) -> Result<PipelineGraph, AutotuneError> {
    if cfg.version != CONFIG_VERSION {
        return Err(AutotuneError::SchemaMismatch(format!(
            "version {} (expected {CONFIG_VERSION})",
            cfg.version
        )));
    }
    let mut g = graph.clone();
    let ids: Vec<String> = g.tunable_ops().map(|o| o.id.clone()).collect();
    let listed: Vec<&String> = cfg.ops.keys().collect();
    let mut sorted_ids: Vec<&String> = ids.iter().collect();
    sorted_ids.sort();
    if listed != sorted_ids {
        return Err(AutotuneError::SchemaMismatch(format!(
            "ops {listed:?} do not match graph ops {sorted_ids:?}"
        )));
    }
    for (id, s) in &cfg.ops {
        if s.workers == 0 || s.queue_capacity == 0 {
            return Err(AutotuneError::OutOfBounds(format!(
                "op `{id}` has a zero setting"
            )));
        }
        let op = g.op_mut(id).expect("checked above");
        op.num_workers = s.workers;
        op.queue_capacity = s.queue_capacity;
    }
    let pairs = map_pairs(&g);
    let mut mask = vec![false; pairs.len()];
    for p in &cfg.fused_pairs {
        let i = pairs.iter().position(|q| q == p).ok_or_else(|| {
            AutotuneError::SchemaMismatch(format!(
                "`{}`/`{}` is not an adjacent map pair",
                p[0], p[1]
            ))
        })?;
        mask[i] = true;
    }
    Ok(fuse_pairs(&g, &mask))
}

/// Discrete search space: per-op workers and queue capacity, plus an
/// optional fuse toggle per adjacent map pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub ops: Vec<String>,
    pub max_workers: usize,
    pub capacities: Vec<usize>,
    pub fusable: Vec<[String; 2]>,
    /// Reject configs whose predicted queue bytes exceed this.
    pub memory_cap_bytes: Option<u64>,
    pub item_bytes: u64,
}

/// A point as one level index per dimension.
pub type Point = Vec<usize>;

impl SearchSpace {
    pub fn for_graph(graph: &PipelineGraph, max_workers: usize, search_fusion: bool) -> Self {
        Self {
            ops: graph.tunable_ops().map(|o| o.id.clone()).collect(),
            max_workers: max_workers.max(1),
            capacities: QUEUE_CAPACITIES.to_vec(),
            fusable: if search_fusion {
                map_pairs(graph)
            } else {
                Vec::new()
            },
            memory_cap_bytes: None,
            item_bytes: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AutotuneError> {
        if self.ops.is_empty() || self.max_workers == 0 || self.capacities.is_empty() {
            return Err(AutotuneError::OutOfBounds("empty search space".into()));
        }
        if self.capacities.contains(&0) {
            return Err(AutotuneError::OutOfBounds("zero queue capacity".into()));
        }
        Ok(())
    }

    /// Number of levels per dimension.
    pub fn levels(&self) -> Vec<usize> {
        let mut l = Vec::with_capacity(self.ops.len() * 2 + self.fusable.len());
        for _ in &self.ops {
            l.push(self.max_workers);
            l.push(self.capacities.len());
        }
        l.extend(std::iter::repeat_n(2, self.fusable.len()));
        l
    }

    /// Total number of points, saturating.
    pub fn size(&self) -> u128 {
        self.levels()
            .iter()
            .fold(1u128, |a, &l| a.saturating_mul(l as u128))
    }

    /// Coordinates in `[0, 1]` per dimension.
    pub fn normalize(&self, p: &Point) -> Vec<f64> {
        p.iter()
            .zip(self.levels())
            .map(|(&v, l)| {
                if l <= 1 {
                    0.0
                } else {
                    v as f64 / (l - 1) as f64
                }
            })
            .collect()
    }

    pub fn decode(&self, p: &Point) -> TuneConfig {
        let mut ops = BTreeMap::new();
        for (i, id) in self.ops.iter().enumerate() {
            ops.insert(
                id.clone(),
                OpSetting {
                    workers: p[2 * i] + 1,
                    queue_capacity: self.capacities[p[2 * i + 1]],
                },
            );
        }
        let base = 2 * self.ops.len();
        let fused_pairs = self
            .fusable
            .iter()
            .enumerate()
            .filter(|(k, _)| p[base + k] == 1)
            .map(|(_, pair)| pair.clone())
            .collect();
        TuneConfig {
            version: CONFIG_VERSION,
            ops,
            fused_pairs,
            objective: None,
            timestamp: None,
        }
    }

    /// Inverse of [`decode`](Self::decode); `None` when a value is off-grid.
    pub fn encode(&self, cfg: &TuneConfig) -> Option<Point> {
        let mut p = Vec::with_capacity(self.levels().len());
        for id in &self.ops {
            let s = cfg.ops.get(id)?;
            if s.workers == 0 || s.workers > self.max_workers {
                return None;
            }
            p.push(s.workers - 1);
            p.push(
                self.capacities
                    .iter()
                    .position(|&c| c == s.queue_capacity)?,
            );
        }
        for pair in &self.fusable {
            p.push(usize::from(cfg.fused_pairs.contains(pair)));
        }
        Some(p)
    }

    pub fn feasible(&self, p: &Point) -> bool {
        match self.memory_cap_bytes {
            Some(cap) => self.decode(p).queue_bytes(self.item_bytes) <= cap,
            None => true,
        }
    }

    /// Every point, in lexicographic order. Only sensible for small spaces.
    pub fn enumerate(&self) -> Vec<Point> {
        let levels = self.levels();
        let mut out = Vec::new();
        let mut cur = vec![0usize; levels.len()];
        loop {
            out.push(cur.clone());
            let mut d = levels.len();
            loop {
                if d == 0 {
                    return out;
                }
                d -= 1;
                cur[d] += 1;
                if cur[d] < levels[d] {
                    break;
                }
                cur[d] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Transform;

    fn graph() -> PipelineGraph {
        PipelineGraph::new(0)
            .source(1, 2)
            .map("a", Transform::Normalize, 2, 4)
            .map("b", Transform::Translate { range: 0.1 }, 3, 8)
            .batch(4)
            .sink(2)
            .validated()
            .unwrap()
    }

    #[test]
    fn encode_decode_round_trip() {
        let g = graph();
        let space = SearchSpace::for_graph(&g, 8, true);
        assert_eq!(space.levels(), vec![8, 7, 8, 7, 8, 7, 2]);
        let cfg = TuneConfig::from_graph(&g);
        let p = space.encode(&cfg).unwrap();
        assert_eq!(space.decode(&p), cfg);
        assert_eq!(space.normalize(&p).len(), 7);
        assert!(space.normalize(&p).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn apply_sets_and_fuses() {
        let g = graph();
        let mut cfg = TuneConfig::from_graph(&g);
        cfg.ops.get_mut("b").unwrap().workers = 6;
        cfg.fused_pairs.push(["a".into(), "b".into()]);
        let out = apply_config(&g, &cfg).unwrap();
        let fused = out.op("a+b").unwrap();
        assert_eq!(fused.num_workers, 6);
        assert_eq!(fused.queue_capacity, 8);

        let mut other = cfg.clone();
        other.ops.remove("b");
        assert!(matches!(
            apply_config(&g, &other),
            Err(AutotuneError::SchemaMismatch(_))
        ));
        let mut v2 = cfg;
        v2.version = 2;
        assert!(matches!(
            apply_config(&g, &v2),
            Err(AutotuneError::SchemaMismatch(_))
        ));
    }

    #[test]
    fn enumerate_small_space() {
        let space = SearchSpace {
            ops: vec!["x".into()],
            max_workers: 3,
            capacities: vec![1, 2],
            fusable: vec![],
            memory_cap_bytes: Some(4),
            item_bytes: 1,
        };
        let all = space.enumerate();
        assert_eq!(all.len(), 6);
        // workers 3 x capacity 2 = 6 slots > cap 4
        assert_eq!(all.iter().filter(|p| space.feasible(p)).count(), 5);
    }
}
