//! Subcommand implementations, callable from tests as plain functions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedkrso::accounting::{round_costs, CostReport, Method};
use fedkrso::config::{PartitionMode, RunConfig};
use fedkrso::error::{Error, Result};
use fedkrso::federation;
use fedkrso::partitioner::{self, PartitionSpec};
use fedkrso::report::{self, RunArtifacts};
use fedkrso::rng::{self, Stream};
use fedkrso::sketch::Seed;
use fedkrso::tasks;

use crate::io::{load_run_config, resolve_out_dir};

/// `run <config>`: execute one run and write its artifacts.
pub fn run_command(config_path: &Path, out: Option<&Path>) -> Result<RunArtifacts> {
    let config = load_run_config(config_path)?;
    config.validate()?;
    let trace = federation::run(&config)?;
    let dir = resolve_out_dir(out, config_path, "_out");
    let artifacts = report::write_run_artifacts(&dir, &config, &trace)?;
    println!(
        "run complete: method {}, {} rounds, final loss {:.6e} -> {}",
        trace.method,
        trace.rounds.len(),
        trace.final_loss,
        dir.display()
    );
    Ok(artifacts)
}

/// Render the cost table for every method at this configuration's shapes.
/// The sketch methods use `federation.sketch_rank`; the adapter baselines
/// use `federation.lora_rank`.
pub fn cost_table(config: &RunConfig, element_width: usize) -> Result<(String, String)> {
    let dims = config.layer_dims();
    let fed = &config.federation;
    let reports: Vec<CostReport> = Method::ALL
        .iter()
        .map(|&m| {
            let rank = match m {
                Method::FedIt | Method::FfaLora => fed.lora_rank,
                _ => fed.sketch_rank,
            };
            round_costs(m, &dims, rank, fed.seed_count, fed.intervals)
        })
        .collect::<Result<_>>()?;

    let full: usize = dims.iter().map(|&(r, c)| r * c).sum();
    let adapter: usize = dims.iter().map(|&(r, c)| (r + c) * fed.sketch_rank).sum();
    let block: usize = dims.iter().map(|&(r, _)| r * fed.sketch_rank).sum();

    let mut text = String::new();
    writeln!(
        text,
        "cost model (parameters): layers {:?}, sketch_rank {}, lora_rank {}, pool {}, intervals {}",
        dims, fed.sketch_rank, fed.lora_rank, fed.seed_count, fed.intervals
    )
    .unwrap();
    writeln!(
        text,
        "per-layer totals: P={full} L={adapter} Q={block} (element width {element_width} bytes)"
    )
    .unwrap();
    writeln!(
        text,
        "{:<16}{:>14}{:>14}{:>14}{:>14}",
        "row", "fedit", "ffa_lora", "fedfft", "fedkrso"
    )
    .unwrap();
    let row = |text: &mut String, name: &str, pick: &dyn Fn(&CostReport) -> usize| {
        let mut line = format!("{name:<16}");
        for report in &reports {
            write!(line, "{:>14}", pick(report)).unwrap();
        }
        writeln!(text, "{line}").unwrap();
    };
    row(&mut text, "mem_weights", &|r| r.weight_params);
    row(&mut text, "mem_gradients", &|r| r.gradient_params);
    row(&mut text, "mem_optstates", &|r| r.optstate_params);
    row(&mut text, "comm_uplink", &|r| r.uplink_params);
    row(&mut text, "comm_downlink", &|r| r.downlink_params);

    let mut csv = String::from("method,row,params,bytes\n");
    for report in &reports {
        let bytes = report.bytes(element_width);
        for (name, params, b) in [
            ("mem_weights", report.weight_params, bytes.weights),
            ("mem_gradients", report.gradient_params, bytes.gradients),
            ("mem_optstates", report.optstate_params, bytes.optstate),
            ("comm_uplink", report.uplink_params, bytes.uplink),
            ("comm_downlink", report.downlink_params, bytes.downlink),
        ] {
            writeln!(csv, "{},{name},{params},{b}", report.method).unwrap();
        }
    }
    Ok((text, csv))
}

/// `costs <config>`: print the cost table, optionally writing the CSV view.
pub fn costs_command(
    config_path: &Path,
    csv_out: Option<&Path>,
    element_width: usize,
) -> Result<String> {
    let config = load_run_config(config_path)?;
    config.validate()?;
    let (text, csv) = cost_table(&config, element_width)?;
    if let Some(path) = csv_out {
        std::fs::write(path, csv)?;
    }
    Ok(text)
}

/// Shard assignment and label histograms written by `partition-report`.
#[derive(Debug, Serialize)]
struct PartitionExport<'a> {
    clients: usize,
    mode: PartitionMode,
    alpha: f64,
    master_seed: u64,
    shards: &'a [Vec<usize>],
}

/// `partition-report <config>`: build the partition, print per-client label
/// histograms and the mean TV distance, and export the shard index lists.
pub fn partition_report_command(config_path: &Path, out: Option<&Path>) -> Result<String> {
    let config = load_run_config(config_path)?;
    config.validate()?;
    let task = tasks::build_task(&config.task, config.master_seed)?;
    let spec = PartitionSpec {
        mode: config.partition.mode,
        alpha: config.partition.alpha,
        clients: config.federation.clients,
        seed: Seed(config.master_seed),
    };
    let shards = partitioner::split(task.dataset(), &spec)?;
    let dir = resolve_out_dir(out, config_path, "_partition");
    std::fs::create_dir_all(&dir)?;
    let export = PartitionExport {
        clients: spec.clients,
        mode: spec.mode,
        alpha: spec.alpha,
        master_seed: config.master_seed,
        shards: &shards,
    };
    std::fs::write(
        dir.join("partition.json"),
        serde_json::to_string_pretty(&export)
            .map_err(|e| Error::Format(format!("serialize: {e}")))?,
    )?;

    let mut text = String::new();
    match (task.dataset().labels(), task.dataset().num_classes()) {
        (Some(labels), Some(classes)) => {
            let report = partitioner::heterogeneity_report(labels, classes, &shards)?;
            writeln!(text, "mean TV distance from global: {:.6}", report.mean_tv_distance).unwrap();
            for client in &report.clients {
                let props: Vec<String> = client
                    .proportions
                    .iter()
                    .map(|p| format!("{p:.3}"))
                    .collect();
                writeln!(
                    text,
                    "client {:>3}: {:>5} examples, tv {:.4}, labels [{}]",
                    client.client,
                    client.examples,
                    client.tv_distance,
                    props.join(", ")
                )
                .unwrap();
            }
            std::fs::write(
                dir.join("heterogeneity.json"),
                serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::Format(format!("serialize: {e}")))?,
            )?;
        }
        _ => {
            writeln!(text, "unlabeled task: shard sizes only").unwrap();
            for (client, shard) in shards.iter().enumerate() {
                writeln!(text, "client {client:>3}: {:>5} examples", shard.len()).unwrap();
            }
        }
    }
    Ok(text)
}

/// Grid specification for `sweep`, parsed from TOML. Axes are optional; the
/// cross product of the present axes is run `repeats` times with sub-seeds
/// derived per repeat, so every cell of one repeat shares data, partition,
/// and initialization. An `alpha` of 0 selects the IID partitioner.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub method: Vec<Method>,
    pub seed_count: Vec<usize>,
    pub interval_len: Vec<usize>,
    pub sketch_rank: Vec<usize>,
    pub alpha: Vec<f64>,
    pub repeats: usize,
    pub workers: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            method: Vec::new(),
            seed_count: Vec::new(),
            interval_len: Vec::new(),
            sketch_rank: Vec::new(),
            alpha: Vec::new(),
            repeats: 1,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    grid: SweepGrid,
}

/// One cell of the sweep cross product.
#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub run_id: String,
    pub method: Method,
    pub seed_count: usize,
    pub intervals: usize,
    pub interval_len: usize,
    pub sketch_rank: usize,
    pub partition: PartitionMode,
    pub alpha: f64,
    pub repeat: usize,
    pub master_seed: u64,
}

/// Result of a sweep: completed runs, recorded failures, artifact paths.
#[derive(Debug)]
pub struct SweepOutcome {
    pub points: usize,
    pub completed: usize,
    pub failures: Vec<(String, String)>,
    pub comparison_csv: PathBuf,
    pub rounds_per_run: usize,
}

fn axis<T: Copy>(values: &[T], fallback: T) -> Vec<T> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    }
}

/// Expand the grid against a base configuration.
pub fn expand_grid(base: &RunConfig, grid: &SweepGrid) -> Result<Vec<(GridPoint, RunConfig)>> {
    if grid.repeats == 0 {
        return Err(Error::invalid_config("grid.repeats must be at least 1"));
    }
    let methods = axis(&grid.method, base.federation.method);
    let seed_counts = axis(&grid.seed_count, base.federation.seed_count);
    let interval_lens = axis(&grid.interval_len, base.federation.interval_len);
    let ranks = axis(&grid.sketch_rank, base.federation.sketch_rank);
    let base_alpha = match base.partition.mode {
        PartitionMode::Iid => 0.0,
        PartitionMode::Dirichlet => base.partition.alpha,
    };
    let alphas = axis(&grid.alpha, base_alpha);
    if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::invalid_config(
            "grid.alpha values must be finite and non-negative (0 selects iid)",
        ));
    }

    let mut out = Vec::new();
    let mut index = 0usize;
    for repeat in 0..grid.repeats {
        let master_seed = rng::derive(base.master_seed, Stream::Sweep, &[repeat as u64]);
        for &method in &methods {
            for &seed_count in &seed_counts {
                for &interval_len in &interval_lens {
                    for &rank in &ranks {
                        for &alpha in &alphas {
                            let mut config = base.clone();
                            config.master_seed = master_seed;
                            config.federation.method = method;
                            config.federation.seed_count = seed_count;
                            config.federation.sketch_rank = rank;
                            config.federation.interval_len = interval_len;
                            if !grid.interval_len.is_empty() {
                                let budget = config.federation.local_iteration_budget;
                                if !budget.is_multiple_of(interval_len) {
                                    return Err(Error::invalid_config(format!(
                                        "interval_len {interval_len} does not divide the \
                                         local iteration budget {budget}"
                                    )));
                                }
                                config.federation.intervals = budget / interval_len;
                            }
                            if alpha > 0.0 {
                                config.partition.mode = PartitionMode::Dirichlet;
                                config.partition.alpha = alpha;
                            } else {
                                config.partition.mode = PartitionMode::Iid;
                            }
                            let run_id = format!(
                                "r{index:03}_{method}_K{seed_count}_J{interval_len}_rk{rank}_a{alpha}_rep{repeat}"
                            );
                            out.push((
                                GridPoint {
                                    run_id,
                                    method,
                                    seed_count,
                                    intervals: config.federation.intervals,
                                    interval_len,
                                    sketch_rank: rank,
                                    partition: config.partition.mode,
                                    alpha,
                                    repeat,
                                    master_seed,
                                },
                                config,
                            ));
                            index += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `sweep <config> <grid>`: run the cross product, one artifact directory
/// per run plus a combined long-format comparison CSV. Failed points are
/// recorded and the sweep continues.
pub fn sweep_command(
    config_path: &Path,
    grid_path: &Path,
    out: Option<&Path>,
    workers_override: Option<usize>,
) -> Result<SweepOutcome> {
    let base = load_run_config(config_path)?;
    base.validate()?;
    let raw = std::fs::read_to_string(grid_path)?;
    let sweep_file: SweepFile = toml::from_str(&raw)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", grid_path.display())))?;
    let grid = sweep_file.grid;
    let points = expand_grid(&base, &grid)?;
    let dir = resolve_out_dir(out, config_path, "_sweep");
    std::fs::create_dir_all(&dir)?;

    let workers = workers_override.unwrap_or(grid.workers).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;

    type PointResult = std::result::Result<(String, Vec<String>), (String, String)>;
    let results: Vec<PointResult> = pool.install(|| {
        use rayon::prelude::*;
        points
            .par_iter()
            .map(|(point, config)| {
                let run = || -> Result<Vec<String>> {
                    config.validate()?;
                    let trace = federation::run(config)?;
                    report::write_run_artifacts(&dir.join("runs").join(&point.run_id), config, &trace)?;
                    let rows = trace
                        .rounds
                        .iter()
                        .map(|r| {
                            format!(
                                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                                point.run_id,
                                point.method,
                                point.seed_count,
                                point.intervals,
                                point.interval_len,
                                point.sketch_rank,
                                match point.partition {
                                    PartitionMode::Iid => "iid",
                                    PartitionMode::Dirichlet => "dirichlet",
                                },
                                point.alpha,
                                point.repeat,
                                point.master_seed,
                                r.round,
                                r.global_loss,
                                r.grad_norm_sq,
                                r.uplink_params,
                                r.downlink_params,
                            )
                        })
                        .collect();
                    Ok(rows)
                };
                match run() {
                    Ok(rows) => Ok((point.run_id.clone(), rows)),
                    Err(e) => Err((point.run_id.clone(), e.to_string())),
                }
            })
            .collect()
    });

    let mut csv = String::from(
        "run_id,method,seed_count,intervals,interval_len,sketch_rank,partition,alpha,\
         repeat,master_seed,round,global_loss,grad_norm_sq,uplink_params,downlink_params\n",
    );
    let mut completed = 0usize;
    let mut failures = Vec::new();
    for result in results {
        match result {
            Ok((_, rows)) => {
                completed += 1;
                for row in rows {
                    csv.push_str(&row);
                    csv.push('\n');
                }
            }
            Err((run_id, message)) => failures.push((run_id, message)),
        }
    }
    let comparison_csv = dir.join("comparison.csv");
    std::fs::write(&comparison_csv, csv)?;
    let summary = serde_json::json!({
        "points": points.len(),
        "completed": completed,
        "failures": failures.iter().map(|(id, msg)| {
            serde_json::json!({"run_id": id, "error": msg})
        }).collect::<Vec<_>>(),
    });
    std::fs::write(
        dir.join("sweep_summary.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Format(format!("serialize: {e}")))?,
    )?;
    Ok(SweepOutcome {
        points: points.len(),
        completed,
        failures,
        comparison_csv,
        rounds_per_run: base.federation.rounds,
    })
}
