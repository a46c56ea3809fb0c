//! Pipeline monitoring and throughput tuning.
//!
//! A [`Monitor`] samples a running pipeline on its own thread. The tuner
//! measures the initial configuration, then proposes worker counts and queue
//! capacities: uniformly at random for the first few points, afterwards by
//! expected improvement under a Gaussian-process surrogate. The best
//! configuration can be saved as JSON and applied when a pipeline starts.

mod monitor;
mod space;
mod surrogate;
mod tuner;

use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use log::warn;
use thiserror::Error;

use crate::pipeline::{run_pipeline, PipelineError, PipelineGraph, PipelineHandle, SampleSource};

pub use monitor::{
    collect_metrics, detect_bottleneck, op_delay_ms, sink_empty_ratio, Bottleneck, MetricsSample,
    Monitor, OpMetrics, DEFAULT_EMPTY_RATIO_THRESHOLD, DEFAULT_INTERVAL, MIN_WINDOW,
};
pub use space::{
    apply_config, map_pairs, OpSetting, Point, SearchSpace, TuneConfig, CONFIG_VERSION,
    QUEUE_CAPACITIES,
};
pub use surrogate::{
    expected_improvement, maximize, propose_config, Gp, Optimizer, Phase, SurrogateState,
    CANDIDATES, OBSERVATION_NOISE, SEED_POINTS,
};
pub use tuner::{
    apply_and_measure, measure, tune_live, tune_restart, Trial, TuneOptions, TuneReport,
};

#[derive(Debug, Error)]
pub enum AutotuneError {
    #[error("pipeline is not running")]
    PipelineStopped,
    #[error("window has {got} samples, need at least {need}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("every configuration in the search space has been tried")]
    SpaceExhausted,
    #[error("config does not match: {0}")]
    SchemaMismatch(String),
    #[error("value out of bounds: {0}")]
    OutOfBounds(String),
    #[error("config file: {0}")]
    IoFailure(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub(crate) fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Writes `cfg` as pretty JSON, replacing `path` atomically.
pub fn persist_best(cfg: &TuneConfig, path: &Path) -> Result<(), AutotuneError> {
    if cfg.version != CONFIG_VERSION {
        return Err(AutotuneError::SchemaMismatch(format!(
            "version {}",
            cfg.version
        )));
    }
    if cfg
        .ops
        .values()
        .any(|s| s.workers == 0 || s.queue_capacity == 0)
    {
        return Err(AutotuneError::OutOfBounds(
            "zero worker count or capacity".into(),
        ));
    }
    let json =
        serde_json::to_vec_pretty(cfg).map_err(|e| AutotuneError::IoFailure(e.to_string()))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, json)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| AutotuneError::IoFailure(format!("{}: {e}", path.display())))
}

pub fn load_best(path: &Path) -> Result<TuneConfig, AutotuneError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AutotuneError::IoFailure(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| AutotuneError::SchemaMismatch(format!("not JSON: {e}")))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CONFIG_VERSION as u64 => {}
        other => {
            return Err(AutotuneError::SchemaMismatch(format!(
                "version {other:?}, expected {CONFIG_VERSION}"
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| AutotuneError::SchemaMismatch(e.to_string()))
}

/// `graph` with the saved config applied, or unchanged (with a warning)
/// when `path` does not exist.
pub fn load_or_default(path: &Path, graph: &PipelineGraph) -> Result<PipelineGraph, AutotuneError> {
    if !path.exists() {
        warn!("no tuned config at {}; using defaults", path.display());
        return Ok(graph.clone());
    }
    apply_config(graph, &load_best(path)?)
}

/// Starts `graph` with the saved config applied before the first batch.
pub fn run_tuned(
    graph: &PipelineGraph,
    source: Arc<dyn SampleSource>,
    path: &Path,
) -> Result<PipelineHandle, AutotuneError> {
    Ok(run_pipeline(&load_or_default(path, graph)?, source)?)
}
