use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::monitor::{
    detect_bottleneck, Bottleneck, Monitor, DEFAULT_EMPTY_RATIO_THRESHOLD, DEFAULT_INTERVAL,
};
use super::space::{apply_config, SearchSpace, TuneConfig};
use super::surrogate::Optimizer;
use super::{unix_now, AutotuneError};
use crate::pipeline::{run_pipeline, Batch, PipelineError, PipelineHandle, SampleSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    /// Proposals after the initial measurement.
    pub iterations: usize,
    /// Measurement window; the same length is spent warming up first.
    pub window: Duration,
    pub max_workers: usize,
    pub seed: u64,
    pub monitor_interval: Duration,
    pub empty_ratio_threshold: f64,
    /// Skip the search when the consumer is not waiting on data.
    pub require_data_side: bool,
    pub memory_cap_bytes: Option<u64>,
    pub item_bytes: u64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            iterations: 10,
            window: Duration::from_millis(500),
            max_workers: 8,
            seed: 0,
            monitor_interval: DEFAULT_INTERVAL,
            empty_ratio_threshold: DEFAULT_EMPTY_RATIO_THRESHOLD,
            require_data_side: false,
            memory_cap_bytes: None,
            item_bytes: 0,
        }
    }
}

impl TuneOptions {
    fn space(&self, space: SearchSpace) -> SearchSpace {
        SearchSpace {
            memory_cap_bytes: self.memory_cap_bytes,
            item_bytes: self.item_bytes,
            ..space
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub iteration: usize,
    pub config: TuneConfig,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub initial: TuneConfig,
    pub initial_objective: f64,
    pub bottleneck: Option<Bottleneck>,
    pub trials: Vec<Trial>,
    /// Best objective after each observation, initial included.
    pub best_history: Vec<f64>,
    pub best: TuneConfig,
    /// Re-measured after applying `best`; `None` in restart mode.
    pub final_objective: Option<f64>,
}

fn map_update_error(e: PipelineError) -> AutotuneError {
    match e {
        PipelineError::UnknownOp(_) | PipelineError::OutOfBounds(_) => {
            AutotuneError::OutOfBounds(e.to_string())
        }
        other => AutotuneError::Pipeline(other),
    }
}

/// Consumes batches for `duration`, returning the number of items seen.
fn pump(
    handle: &PipelineHandle,
    duration: Duration,
    consumer: &mut dyn FnMut(Batch),
) -> Result<usize, AutotuneError> {
    let deadline = Instant::now() + duration;
    let probe = handle.probe();
    let mut items = 0;
    loop {
        let now = Instant::now();
        if now >= deadline {
            return Ok(items);
        }
        match handle.next_batch_timeout(deadline - now) {
            Some(Ok(b)) => {
                items += b.len();
                consumer(b);
            }
            Some(Err(e)) => return Err(AutotuneError::Pipeline(e)),
            None if probe.is_stopped() => return Err(AutotuneError::PipelineStopped),
            None => {}
        }
    }
}

/// Items per second over `window`, after a warm-up of the same length.
pub fn measure(
    handle: &PipelineHandle,
    window: Duration,
    consumer: &mut dyn FnMut(Batch),
) -> Result<f64, AutotuneError> {
    pump(handle, window, consumer)?;
    let started = Instant::now();
    let items = pump(handle, window, consumer)?;
    Ok(items as f64 / started.elapsed().as_secs_f64())
}

/// Sends one update per op, in order, waits until the pipeline has applied
/// them at batch boundaries, then measures.
pub fn apply_and_measure(
    handle: &PipelineHandle,
    cfg: &TuneConfig,
    window: Duration,
    consumer: &mut dyn FnMut(Batch),
) -> Result<f64, AutotuneError> {
    if !cfg.fused_pairs.is_empty() {
        return Err(AutotuneError::SchemaMismatch(
            "fusion cannot change on a running pipeline".into(),
        ));
    }
    for (id, s) in &cfg.ops {
        handle
            .update_op_config(id, Some(s.workers), Some(s.queue_capacity))
            .map_err(map_update_error)?;
    }
    let limit = Instant::now() + window.max(Duration::from_millis(100)) * 20;
    while !handle.updates_applied() {
        if Instant::now() > limit {
            debug!("config updates still pending; measuring anyway");
            break;
        }
        pump(handle, Duration::from_millis(5), consumer)?;
    }
    measure(handle, window, consumer)
}

fn best_of(opt: &Optimizer, fallback: &TuneConfig) -> TuneConfig {
    let mut best = opt.best_config().unwrap_or_else(|| fallback.clone());
    best.timestamp = Some(unix_now());
    best
}

/// Tunes worker counts and queue capacities of a running pipeline. Every
/// batch pulled while tuning goes to `consumer`, in stream order.
pub fn tune_live(
    handle: &PipelineHandle,
    opts: &TuneOptions,
    consumer: &mut dyn FnMut(Batch),
) -> Result<TuneReport, AutotuneError> {
    let space = opts.space(SearchSpace::for_graph(
        handle.graph(),
        opts.max_workers,
        false,
    ));
    space.validate()?;
    let mut initial = TuneConfig::from_graph(handle.graph());
    for (id, s) in initial.ops.iter_mut() {
        if let Some((w, c)) = handle.op_config(id) {
            s.workers = w;
            s.queue_capacity = c;
        }
    }

    let monitor = Monitor::start(handle.probe(), opts.monitor_interval);
    let initial_objective = measure(handle, opts.window, consumer)?;
    let bottleneck = detect_bottleneck(&monitor.stop(), opts.empty_ratio_threshold).ok();
    info!("initial throughput {initial_objective:.1} items/s, bottleneck {bottleneck:?}");
    initial.objective = Some(initial_objective);

    let mut opt = Optimizer::new(space, opts.seed);
    if let Some(p) = opt.space.encode(&initial) {
        opt.observe(p, initial_objective);
    }
    let mut trials = Vec::new();
    let skip = opts.require_data_side && bottleneck == Some(Bottleneck::NetworkSide);
    for iteration in 0..if skip { 0 } else { opts.iterations } {
        let p = match opt.propose() {
            Ok(p) => p,
            Err(AutotuneError::SpaceExhausted) => break,
            Err(e) => return Err(e),
        };
        let cfg = opt.space.decode(&p);
        let objective = apply_and_measure(handle, &cfg, opts.window, consumer)?;
        debug!(
            "trial {iteration}: {objective:.1} items/s for {:?}",
            cfg.ops
        );
        opt.observe(p, objective);
        trials.push(Trial {
            iteration,
            config: cfg,
            objective,
        });
    }

    let best = if opt.state.best().is_some_and(|(_, v)| v > initial_objective) {
        best_of(&opt, &initial)
    } else {
        initial.clone()
    };
    let mut applied = best.clone();
    applied.objective = None;
    let final_objective = apply_and_measure(handle, &applied, opts.window, consumer)?;
    info!(
        "best throughput {:.1} items/s, re-measured {final_objective:.1}",
        best.objective.unwrap_or(0.0)
    );
    Ok(TuneReport {
        initial,
        initial_objective,
        bottleneck,
        trials,
        best_history: opt.state.best_history.clone(),
        best,
        final_objective: Some(final_objective),
    })
}

/// Tunes by restarting the pipeline for each proposal, which also allows
/// searching map fusion.
pub fn tune_restart(
    graph: &crate::pipeline::PipelineGraph,
    source: Arc<dyn SampleSource>,
    opts: &TuneOptions,
    search_fusion: bool,
) -> Result<TuneReport, AutotuneError> {
    let space = opts.space(SearchSpace::for_graph(
        graph,
        opts.max_workers,
        search_fusion,
    ));
    space.validate()?;
    let run = |cfg: &TuneConfig| -> Result<f64, AutotuneError> {
        let g = apply_config(graph, cfg)?;
        let mut handle = run_pipeline(&g, source.clone())?;
        let r = measure(&handle, opts.window, &mut |_| {});
        handle.shutdown();
        r
    };
    let mut initial = TuneConfig::from_graph(graph);
    let initial_objective = run(&initial)?;
    initial.objective = Some(initial_objective);
    let mut opt = Optimizer::new(space, opts.seed);
    if let Some(p) = opt.space.encode(&initial) {
        opt.observe(p, initial_objective);
    }
    let mut trials = Vec::new();
    for iteration in 0..opts.iterations {
        let p = match opt.propose() {
            Ok(p) => p,
            Err(AutotuneError::SpaceExhausted) => break,
            Err(e) => return Err(e),
        };
        let cfg = opt.space.decode(&p);
        let objective = run(&cfg)?;
        opt.observe(p, objective);
        trials.push(Trial {
            iteration,
            config: cfg,
            objective,
        });
    }
    let best = if opt.state.best().is_some_and(|(_, v)| v > initial_objective) {
        best_of(&opt, &initial)
    } else {
        initial.clone()
    };
    Ok(TuneReport {
        initial,
        initial_objective,
        bottleneck: None,
        trials,
        best_history: opt.state.best_history.clone(),
        best,
        final_objective: None,
    })
}
