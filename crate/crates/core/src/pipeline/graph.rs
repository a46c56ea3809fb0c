use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::transform::{FieldNames, Transform};
use super::PipelineError;

pub const MAX_WORKERS: usize = 64;
pub const DEFAULT_QUEUE_CAPACITY: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Source,
    Map,
    Batch,
    Sink,
}

/// One transform inside a map node. `op_id` feeds the per-sample seed, so it
/// survives fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapStep {
    pub op_id: String,
    pub transform: Transform,
}

fn one() -> usize {
    1
}

fn default_capacity() -> usize {
    DEFAULT_QUEUE_CAPACITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    pub id: String,
    pub kind: OpKind,
    /// Shorthand for a single-step map; folded into `steps` on validation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<Transform>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<MapStep>,
    #[serde(default = "one")]
    pub num_workers: usize,
    /// Capacity of each worker's output queue; for the sink, of the device queue.
    #[serde(default = "default_capacity")]
    pub queue_capacity: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl OpNode {
    fn new(id: impl Into<String>, kind: OpKind) -> Self {
        Self {
            id: id.into(),
            kind,
            transform: None,
            steps: Vec::new(),
            num_workers: 1,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            batch_size: None,
        }
    }
}

/// A linear operator chain: source, maps, batch, sink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineGraph {
    pub ops: Vec<OpNode>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "one_epoch")]
    pub epochs: u32,
    /// Emit the short trailing batch of each epoch instead of dropping it.
    #[serde(default)]
    pub keep_remainder: bool,
    #[serde(default)]
    pub fields: FieldNames,
}

fn one_epoch() -> u32 {
    1
}

impl PipelineGraph {
    pub fn new(base_seed: u64) -> Self {
        Self {
            ops: Vec::new(),
            base_seed,
            epochs: 1,
            keep_remainder: false,
            fields: FieldNames::default(),
        }
    }

    pub fn source(mut self, workers: usize, capacity: usize) -> Self {
        let mut n = OpNode::new("source", OpKind::Source);
        n.num_workers = workers;
        n.queue_capacity = capacity;
        self.ops.push(n);
        self
    }

    pub fn map(mut self, id: &str, transform: Transform, workers: usize, capacity: usize) -> Self {
        let mut n = OpNode::new(id, OpKind::Map);
        n.steps = vec![MapStep {
            op_id: id.into(),
            transform,
        }];
        n.num_workers = workers;
        n.queue_capacity = capacity;
        self.ops.push(n);
        self
    }

    pub fn batch(mut self, batch_size: usize) -> Self {
        let mut n = OpNode::new("batch", OpKind::Batch);
        n.batch_size = Some(batch_size);
        self.ops.push(n);
        self
    }

    pub fn sink(mut self, capacity: usize) -> Self {
        let mut n = OpNode::new("sink", OpKind::Sink);
        n.queue_capacity = capacity;
        self.ops.push(n);
        self
    }

    pub fn epochs(mut self, epochs: u32) -> Self {
        self.epochs = epochs;
        self
    }

    /// Normalize and translate maps, batches of 32.
    pub fn modelnet40_default(base_seed: u64) -> Self {
        Self::new(base_seed)
            .source(2, 8)
            .map("normalize", Transform::Normalize, 2, 8)
            .map("translate", Transform::Translate { range: 0.2 }, 2, 8)
            .batch(32)
            .sink(4)
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let g: Self =
            serde_json::from_str(text).map_err(|e| PipelineError::InvalidGraph(e.to_string()))?;
        g.validated()
    }

    pub fn batch_size(&self) -> usize {
        self.ops.iter().find_map(|o| o.batch_size).unwrap_or(1)
    }

    pub fn sink_capacity(&self) -> usize {
        self.ops.last().map_or(1, |o| o.queue_capacity)
    }

    pub fn op(&self, id: &str) -> Option<&OpNode> {
        self.ops.iter().find(|o| o.id == id)
    }

    pub fn op_mut(&mut self, id: &str) -> Option<&mut OpNode> {
        self.ops.iter_mut().find(|o| o.id == id)
    }

    /// Ops whose workers and queue capacity can be changed while running.
    pub fn tunable_ops(&self) -> impl Iterator<Item = &OpNode> {
        self.ops
            .iter()
            .filter(|o| matches!(o.kind, OpKind::Source | OpKind::Map))
    }

    /// Checks structure and bounds; folds `transform` shorthands into `steps`.
    pub fn validated(mut self) -> Result<Self, PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidGraph(m));
        if self.ops.len() < 3 {
            return bad("need at least source, batch and sink".into());
        }
        let mut ids = HashSet::new();
        let last = self.ops.len() - 1;
        for (i, op) in self.ops.iter_mut().enumerate() {
            if !ids.insert(op.id.clone()) {
                return bad(format!("duplicate op id `{}`", op.id));
            }
            let expected = match i {
                0 => OpKind::Source,
                _ if i == last => OpKind::Sink,
                _ if i == last - 1 => OpKind::Batch,
                _ => OpKind::Map,
            };
            if op.kind != expected {
                return bad(format!(
                    "op `{}` at position {i} must be {expected:?}",
                    op.id
                ));
            }
            if op.num_workers == 0 || op.num_workers > MAX_WORKERS {
                return bad(format!(
                    "op `{}`: num_workers must be in [1, {MAX_WORKERS}]",
                    op.id
                ));
            }
            if op.queue_capacity == 0 {
                return bad(format!("op `{}`: queue_capacity must be positive", op.id));
            }
            match op.kind {
                OpKind::Map => {
                    if let Some(t) = op.transform.take() {
                        op.steps.insert(
                            0,
                            MapStep {
                                op_id: op.id.clone(),
                                transform: t,
                            },
                        );
                    }
                    if op.steps.is_empty() {
                        return bad(format!("map `{}` has no transform", op.id));
                    }
                }
                OpKind::Batch => {
                    if op.batch_size.unwrap_or(0) == 0 {
                        return bad("batch_size must be positive".into());
                    }
                    if op.num_workers != 1 {
                        return bad("the batch op runs on one thread".into());
                    }
                }
                _ if op.transform.is_some() || !op.steps.is_empty() => {
                    return bad(format!("op `{}` cannot carry transforms", op.id));
                }
                _ => {}
            }
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        Ok(self)
    }

    /// Number of adjacent map pairs, the length of a fuse mask.
    pub fn fusable_pairs(&self) -> usize {
        self.ops
            .windows(2)
            .filter(|w| w[0].kind == OpKind::Map && w[1].kind == OpKind::Map)
            .count()
    }
}

/// Merges every run of adjacent map nodes into one node.
pub fn fuse_maps(graph: &PipelineGraph) -> PipelineGraph {
    fuse_pairs(graph, &vec![true; graph.fusable_pairs()])
}

/// Merges adjacent map pair `i` when `mask[i]` is set. The fused node runs
/// the steps in order with `max` of the workers and queue capacities.
pub fn fuse_pairs(graph: &PipelineGraph, mask: &[bool]) -> PipelineGraph {
    let mut out = PipelineGraph {
        ops: Vec::with_capacity(graph.ops.len()),
        ..graph.clone()
    };
    let mut pair = 0;
    let mut prev_map = false;
    for op in &graph.ops {
        let is_map = op.kind == OpKind::Map;
        let fuse = is_map && prev_map && mask.get(pair).copied().unwrap_or(false);
        if is_map && prev_map {
            pair += 1;
        }
        if fuse {
            let last = out.ops.last_mut().expect("previous map present");
            last.id = format!("{}+{}", last.id, op.id);
            last.steps.extend(op.steps.iter().cloned());
            if let Some(t) = &op.transform {
                last.steps.push(MapStep {
                    op_id: op.id.clone(),
                    transform: t.clone(),
                });
            }
            last.num_workers = last.num_workers.max(op.num_workers);
            last.queue_capacity = last.queue_capacity.max(op.queue_capacity);
        } else {
            out.ops.push(op.clone());
        }
        prev_map = is_map;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_with_shorthand() {
        let text = r#"{
            "base_seed": 7,
            "ops": [
                {"id": "src", "kind": "source", "num_workers": 2},
                {"id": "norm", "kind": "map", "transform": {"name": "normalize"}, "queue_capacity": 4},
                {"id": "batch", "kind": "batch", "batch_size": 32},
                {"id": "sink", "kind": "sink", "queue_capacity": 2}
            ]
        }"#;
        let g = PipelineGraph::from_json(text).unwrap();
        assert_eq!(
            g.ops[1].steps,
            vec![MapStep {
                op_id: "norm".into(),
                transform: Transform::Normalize
            }]
        );
        assert_eq!(g.batch_size(), 32);
        assert_eq!(g.sink_capacity(), 2);
        let back = PipelineGraph::from_json(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn structural_errors() {
        let ok = PipelineGraph::new(0).source(1, 1).batch(4).sink(1);
        assert!(ok.clone().validated().is_ok());
        let mut dup = ok.clone();
        dup.ops[1].id = "source".into();
        assert!(dup.validated().is_err());
        let swapped = PipelineGraph::new(0).source(1, 1).sink(1).batch(4);
        assert!(swapped.validated().is_err());
        let zero = PipelineGraph::new(0).source(0, 1).batch(4).sink(1);
        assert!(zero.validated().is_err());
        let late_map = PipelineGraph::new(0)
            .source(1, 1)
            .batch(4)
            .map("m", Transform::Normalize, 1, 1)
            .sink(1);
        assert!(late_map.validated().is_err());
    }

    #[test]
    fn fusion() {
        let g = PipelineGraph::modelnet40_default(1);
        let f = fuse_maps(&g);
        assert_eq!(f.ops.len(), 4);
        assert_eq!(f.ops[1].id, "normalize+translate");
        assert_eq!(
            f.ops[1]
                .steps
                .iter()
                .map(|s| s.op_id.as_str())
                .collect::<Vec<_>>(),
            ["normalize", "translate"]
        );
        assert!(f.clone().validated().is_ok());

        let single = PipelineGraph::new(0)
            .source(1, 1)
            .map("m", Transform::Normalize, 3, 2)
            .batch(4)
            .sink(1);
        assert_eq!(fuse_maps(&single), single);
        let none = PipelineGraph::new(0).source(1, 1).batch(4).sink(1);
        assert_eq!(fuse_maps(&none), none);

        let three = PipelineGraph::new(0)
            .source(1, 1)
            .map("a", Transform::Normalize, 1, 1)
            .map("b", Transform::Normalize, 4, 1)
            .map("c", Transform::Normalize, 2, 9)
            .batch(4)
            .sink(1);
        assert_eq!(three.fusable_pairs(), 2);
        let partial = fuse_pairs(&three, &[false, true]);
        assert_eq!(
            partial
                .ops
                .iter()
                .map(|o| o.id.as_str())
                .collect::<Vec<_>>(),
            ["source", "a", "b+c", "batch", "sink"]
        );
        assert_eq!(
            (partial.ops[2].num_workers, partial.ops[2].queue_capacity),
            (4, 9)
        );
    }
}
