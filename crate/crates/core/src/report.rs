//! On-disk run artifacts: per-round trace CSV, timing sidecar, run
//! manifest, and summary.
//!
//! The trace CSV contains only deterministic columns, so two runs of the
//! same manifest produce byte-identical files; wall-clock timing goes to a
//! separate `timing.csv` and the summary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accounting::Method;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::federation::TrainingTrace;

/// Everything needed to reproduce a run byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Crate version that produced the artifacts.
    pub version: String,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(config: RunConfig) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
        }
    }
}

/// Totals and finals written to `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub rounds: usize,
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    /// Sum over rounds and clients of measured uploads.
    pub total_uplink_params: usize,
    /// Sum over rounds and clients of broadcast parameters.
    pub total_downlink_params: usize,
    pub wall_seconds: f64,
}

pub fn summarize(trace: &TrainingTrace) -> RunSummary {
    let total_uplink = trace
        .rounds
        .iter()
        .map(|r| r.per_client_uplink.iter().sum::<usize>())
        .sum();
    let total_downlink = trace
        .rounds
        .iter()
        .map(|r| r.downlink_params * r.per_client_uplink.len())
        .sum();
    RunSummary {
        method: trace.method,
        rounds: trace.rounds.len(),
        final_loss: trace.final_loss,
        final_grad_norm_sq: trace.final_grad_norm_sq,
        total_uplink_params: total_uplink,
        total_downlink_params: total_downlink,
        wall_seconds: trace.total_seconds,
    }
}

/// Deterministic per-round trace. `uplink_params` is the worst client's
/// measured upload for the round; `downlink_params` is per client.
pub fn trace_csv(trace: &TrainingTrace) -> String {
    let mut out = String::from("round,global_loss,grad_norm_sq,uplink_params,downlink_params\n");
    for r in &trace.rounds {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.round, r.global_loss, r.grad_norm_sq, r.uplink_params, r.downlink_params
        ));
    }
    out
}

/// Wall-clock sidecar, one row per round.
pub fn timing_csv(trace: &TrainingTrace) -> String {
    let mut out = String::from("round,seconds\n");
    for r in &trace.rounds {
        out.push_str(&format!("{},{:.6}\n", r.round, r.seconds));
    }
    out
}

/// Paths of the artifacts a run writes.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub trace: PathBuf,
    pub timing: PathBuf,
    pub manifest: PathBuf,
    pub summary: PathBuf,
}

/// Write trace.csv, timing.csv, manifest.json, and summary.json under `dir`.
pub fn write_run_artifacts(
    dir: &Path,
    config: &RunConfig,
    trace: &TrainingTrace,
) -> Result<RunArtifacts> {
    fs::create_dir_all(dir)?;
    let artifacts = RunArtifacts {
        trace: dir.join("trace.csv"),
        timing: dir.join("timing.csv"),
        manifest: dir.join("manifest.json"),
        summary: dir.join("summary.json"),
    };
    fs::write(&artifacts.trace, trace_csv(trace))?;
    fs::write(&artifacts.timing, timing_csv(trace))?;
    let manifest = RunManifest::new(config.clone());
    fs::write(&artifacts.manifest, to_json_pretty(&manifest)?)?;
    fs::write(&artifacts.summary, to_json_pretty(&summarize(trace))?)?;
    Ok(artifacts)
}

/// Load the configuration back out of a manifest file.
pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let raw = fs::read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|e| Error::Format(format!("manifest parse error: {e}")))
}

fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Format(format!("serialize: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::RoundRecord;

    fn sample_trace() -> TrainingTrace {
        let record = |round: usize, loss: f64| RoundRecord {
            round,
            global_loss: loss,
            grad_norm_sq: loss * 2.0,
            uplink_params: 24,
            downlink_params: 52,
            seconds: 0.125,
            per_client_uplink: vec![24, 12],
            seed_usage: vec![1, 3],
            reconstruction_dev: None,
            reset_dev: None,
            aggregation_dev: None,
        };
        TrainingTrace {
            method: Method::FedKrso,
            rounds: vec![record(0, 0.5), record(1, 0.25)],
            final_loss: 0.25,
            final_grad_norm_sq: 0.5,
            final_weights: crate::tasks::WeightSet::new(vec![ndarray::Array2::zeros((1, 1))]),
            total_seconds: 0.25,
        }
    }

    #[test]
    fn trace_csv_has_only_deterministic_columns() {
        let csv = trace_csv(&sample_trace());
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "round,global_loss,grad_norm_sq,uplink_params,downlink_params"
        );
        assert_eq!(lines.next().unwrap(), "0,0.5,1,24,52");
        assert_eq!(lines.next().unwrap(), "1,0.25,0.5,24,52");
        assert!(lines.next().is_none());
        assert!(!csv.contains("0.125"));
    }

    #[test]
    fn summary_totals_sum_over_rounds_and_clients() {
        let summary = summarize(&sample_trace());
        assert_eq!(summary.total_uplink_params, 2 * (24 + 12));
        assert_eq!(summary.total_downlink_params, 2 * 2 * 52);
        assert_eq!(summary.rounds, 2);
        assert_eq!(summary.final_loss, 0.25);
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let manifest = RunManifest::new(crate::config::RunConfig::default());
        let raw = to_json_pretty(&manifest).unwrap();
        let back: RunManifest = serde_json::from_str(&raw).unwrap();
        assert_eq!(back.version, manifest.version);
        back.config.validate().unwrap();
    }
}
