use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use pcpipe::autotune::{persist_best, tune_live, tune_restart, TuneOptions};
use pcpipe::bench::{run_benchmark, with_env_seed, BenchOptions};
use pcpipe::distributed::{simulate_data_parallel, ShardSpec, SimulationConfig, ToyModel};
use pcpipe::format::{write_dataset, DatasetReader, FieldKind, FieldType, Schema, WriteOptions};
use pcpipe::index::{build_index, pad_for_shards};
use pcpipe::ingest::{cloud_to_sample, convert, synth, ConvertOptions, SourceKind};
use pcpipe::pipeline::{IndexSource, PipelineGraph, SampleSource, Transform};
use pcpipe::streaming::{open_store, stream_dataset, DiskBudget, StoreServer};

#[derive(Parser)]
#[command(name = "pcpipe", version, about = "Point-cloud dataset toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a directory of point-cloud files into a .pcrecord dataset.
    Convert {
        #[arg(long)]
        kind: SourceKind,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// `modelnet40` (default except for kitti_bin), `points`, `kitti`,
        /// or a JSON schema file.
        #[arg(long)]
        schema: Option<String>,
        #[arg(long, default_value_t = 1)]
        slices: usize,
        #[arg(long, default_value_t = pcpipe::format::DEFAULT_GROUP_SIZE)]
        group_size: usize,
        /// Truncate or cyclically pad every cloud to this many points.
        #[arg(long)]
        num_points: Option<usize>,
        #[arg(long, default_value = "dataset")]
        stem: String,
    },
    /// Print the schema, slices and groups of a dataset.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Time repeated full passes of a pipeline over a dataset.
    Bench {
        #[arg(long)]
        dataset: PathBuf,
        /// Pipeline graph JSON; defaults to normalize + translate, batch 32.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 10)]
        interval_ms: u64,
        #[arg(long)]
        out_json: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Search worker counts and queue capacities for the best throughput.
    Tune {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        /// Monitor sampling interval.
        #[arg(long, default_value_t = 10)]
        interval_ms: u64,
        /// Measurement window per trial.
        #[arg(long, default_value_t = 500)]
        window_ms: u64,
        #[arg(long, default_value_t = 8)]
        max_workers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restart the pipeline per trial and also search map fusion.
        #[arg(long)]
        fusion: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate data-parallel training and compare against one device.
    ShardSim {
        #[arg(long)]
        num_shards: usize,
        #[arg(long, default_value_t = 1)]
        epochs: u32,
        /// Global batch size.
        #[arg(long)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset with `data` and `label` fields; synthesized when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 0.05)]
        learning_rate: f64,
    },
    /// Serve a directory of slice files over HTTP.
    ServeStore {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Stream a dataset from an object store under a disk quota.
    Stream {
        #[arg(long)]
        store_url: String,
        #[arg(long)]
        quota_bytes: u64,
        #[arg(long, default_value_t = 0.8)]
        watermark: f64,
        #[arg(long)]
        staging: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        num_shards: usize,
        #[arg(long, default_value_t = 0)]
        shard_id: usize,
    },
}

fn schema_for(kind: SourceKind, name: Option<&str>) -> Result<Schema> {
    let points = || Schema::new().with("data", FieldType::tensor(FieldKind::Bytes, vec![3]));
    Ok(match name {
        None if kind == SourceKind::KittiBin => {
            points().with("intensity", FieldType::tensor(FieldKind::Bytes, vec![1]))
        }
        None | Some("modelnet40") => Schema::modelnet40(),
        Some("points") => points().with("label", FieldType::scalar(FieldKind::Int32)),
        Some("kitti") => points().with("intensity", FieldType::tensor(FieldKind::Bytes, vec![1])),
        Some(path) => {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("reading schema {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing schema {path}"))?
        }
    })
}

fn load_graph(path: Option<&Path>) -> Result<PipelineGraph> {
    let graph = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading graph {}", p.display()))?;
            PipelineGraph::from_json(&text)?
        }
        None => PipelineGraph::modelnet40_default(0),
    };
    Ok(with_env_seed(&graph))
}

fn open_source(dataset: &Path) -> Result<Arc<dyn SampleSource>> {
    let reader = Arc::new(
        DatasetReader::open(dataset).with_context(|| format!("opening {}", dataset.display()))?,
    );
    let index = build_index(&reader.headers())?;
    Ok(Arc::new(IndexSource::new(reader, index.entries().to_vec())))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn inspect(path: &Path, json: bool) -> Result<()> {
    let reader =
        DatasetReader::open(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers();
    if json {
        return print_json(&headers);
    }
    let first = headers.first().context("dataset has no slices")?;
    println!("schema:");
    for f in &first.schema.fields {
        println!("  {}: {:?} {:?}", f.name, f.ty.kind, f.ty.shape);
    }
    println!("total size: {} bytes", first.total_size_bytes);
    println!("slices:");
    for h in &headers {
        let name = &h.slice_paths[h.slice_index as usize];
        println!(
            "  {name}: {} groups, {} samples",
            h.group_index.len(),
            h.sample_count()
        );
    }
    println!(
        "samples: {}",
        headers.iter().map(|h| h.sample_count()).sum::<u64>()
    );
    Ok(())
}

/// Writes `n` labelled shape clouds in the ModelNet40 layout.
fn synthesize(dir: &Path, n: usize) -> Result<()> {
    let schema = Schema::modelnet40();
    let samples = (0..n)
        .map(|i| {
            let mut cloud = synth::shape_cloud(i % 4, i as u64, 64);
            cloud.label = Some((i % 16) as i32);
            cloud_to_sample(&cloud, &schema)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let opts = WriteOptions {
        slice_count: 2,
        group_size: 32,
        stem: "synthetic".into(),
    };
    write_dataset(samples, &schema, &opts, dir)?;
    Ok(())
}

fn shard_sim(
    num_shards: usize,
    epochs: u32,
    batch_size: usize,
    seed: u64,
    dataset: Option<PathBuf>,
    samples: usize,
    learning_rate: f64,
) -> Result<()> {
    ShardSpec::new(num_shards, 0)?;
    let tmp;
    let dir = match dataset {
        Some(d) => d,
        None => {
            tmp = tempfile::tempdir()?;
            synthesize(tmp.path(), samples)?;
            tmp.path().to_path_buf()
        }
    };
    let reader = Arc::new(DatasetReader::open(&dir)?);
    let index = pad_for_shards(&build_index(&reader.headers())?, num_shards);
    let graph = PipelineGraph::new(seed)
        .source(1, 4)
        .map(
            "jitter",
            Transform::Jitter {
                sigma: 0.01,
                clip: 0.05,
            },
            2,
            4,
        )
        .batch(batch_size)
        .sink(2);
    let config = |devices| {
        let mut c = SimulationConfig::new(
            devices,
            batch_size,
            ToyModel::seeded(6, learning_rate, seed),
            graph.clone(),
        );
        c.epochs = epochs;
        c
    };
    let report = simulate_data_parallel(reader.clone(), &index, &config(num_shards))?;
    let single = simulate_data_parallel(reader, &index, &config(1))?;
    print_json(&serde_json::json!({
        "report": report,
        "single_device_params_hash": single.params_hash,
        "matches_single_device": single.params == report.params,
    }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert {
            kind,
            input,
            output,
            schema,
            slices,
            group_size,
            num_points,
            stem,
        } => {
            let schema = schema_for(kind, schema.as_deref())?;
            let opts = ConvertOptions {
                kind,
                slice_count: slices,
                group_size,
                num_points,
                stem,
            };
            let conversion = convert(&input, &schema, &opts, &output)?;
            print_json(&conversion.report)
        }
        Command::Inspect { path, json } => inspect(&path, json),
        Command::Bench {
            dataset,
            graph,
            repeats,
            interval_ms,
            out_json,
            out_csv,
        } => {
            let graph = load_graph(graph.as_deref())?;
            let opts = BenchOptions {
                repeats,
                sample_interval: Duration::from_millis(interval_ms.max(1)),
            };
            let report = run_benchmark(&graph, open_source(&dataset)?, &opts)?;
            if let Some(p) = out_csv {
                std::fs::write(&p, report.to_csv())
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(p) = out_json {
                std::fs::write(&p, serde_json::to_vec_pretty(&report)?)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            print_json(&report)
        }
        Command::Tune {
            dataset,
            graph,
            iterations,
            interval_ms,
            window_ms,
            max_workers,
            seed,
            fusion,
            out,
        } => {
            let mut graph = load_graph(graph.as_deref())?;
            let source = open_source(&dataset)?;
            let opts = TuneOptions {
                iterations,
                window: Duration::from_millis(window_ms),
                max_workers,
                seed,
                monitor_interval: Duration::from_millis(interval_ms.max(1)),
                ..TuneOptions::default()
            };
            graph.epochs = u32::MAX;
            let report = if fusion {
                tune_restart(&graph, source, &opts, true)?
            } else {
                let mut handle = pcpipe::pipeline::run_pipeline(&graph, source)?;
                let report = tune_live(&handle, &opts, &mut |_| {})?;
                handle.shutdown();
                report
            };
            persist_best(&report.best, &out)?;
            info!("best config written to {}", out.display());
            print_json(&report)
        }
        Command::ShardSim {
            num_shards,
            epochs,
            batch_size,
            seed,
            dataset,
            samples,
            learning_rate,
        } => shard_sim(
            num_shards,
            epochs,
            batch_size,
            seed,
            dataset,
            samples,
            learning_rate,
        ),
        Command::ServeStore { root, addr } => {
            let server = StoreServer::start(&root, &addr)?;
            println!("serving {} at {}", root.display(), server.url());
            server.join();
            Ok(())
        }
        Command::Stream {
            store_url,
            quota_bytes,
            watermark,
            staging,
            graph,
            num_shards,
            shard_id,
        } => {
            let graph = load_graph(graph.as_deref())?;
            let tmp;
            let staging = match staging {
                Some(p) => p,
                None => {
                    tmp = tempfile::tempdir()?;
                    tmp.path().to_path_buf()
                }
            };
            let store: Arc<dyn pcpipe::streaming::ObjectStore> = Arc::from(open_store(&store_url));
            let budget = DiskBudget::new(quota_bytes, staging).with_watermark(watermark);
            let handle =
                stream_dataset(store, budget, ShardSpec::new(num_shards, shard_id)?, &graph)?;
            let (mut batches, mut items) = (0usize, 0usize);
            while let Some(b) = handle.next_batch() {
                match b {
                    Ok(b) => {
                        batches += 1;
                        items += b.len();
                    }
                    Err(e) => match handle.failure() {
                        Some(cause) => bail!("{cause}"),
                        None => return Err(e.into()),
                    },
                }
            }
            let (run, stats) = handle.finish()?;
            print_json(&serde_json::json!({
                "batches": batches,
                "items": items,
                "elapsed_secs": run.elapsed_secs,
                "stream": stats,
            }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
