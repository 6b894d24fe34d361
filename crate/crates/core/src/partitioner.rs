//! Deterministic IID and Dirichlet non-IID dataset partitioning.
//!
//! Dirichlet mode draws, for each class, a proportion vector over clients
//! from `Dirichlet(alpha * 1_N)` and deals that class's examples out by the
//! cumulative proportions. Smaller `alpha` concentrates each class on fewer
//! clients. Draws that leave any shard empty are retried a bounded number
//! of times.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::config::PartitionMode;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::sketch::Seed;
use crate::tasks::SyntheticDataset;

const MAX_RESAMPLE_ATTEMPTS: usize = 16;

/// How to split a dataset across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    /// Dirichlet concentration; ignored in IID mode.
    pub alpha: f64,
    pub clients: usize,
    pub seed: Seed,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::invalid_config("partition clients must be at least 1"));
        }
        if self.mode == PartitionMode::Dirichlet && !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::invalid_config(
                "partition alpha must be positive in dirichlet mode",
            ));
        }
        Ok(())
    }
}

/// Split a dataset into per-client index shards. Shards are disjoint, cover
/// the dataset, and are all non-empty.
pub fn split(dataset: &SyntheticDataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let n = dataset.num_examples();
    if n < spec.clients {
        return Err(Error::invalid_argument(format!(
            "cannot split {n} examples across {} clients",
            spec.clients
        )));
    }
    let mut rng = rng::stream_rng(spec.seed.0, Stream::Partition, &[]);
    match spec.mode {
        PartitionMode::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut shards = vec![Vec::new(); spec.clients];
            for (pos, ix) in order.into_iter().enumerate() {
                shards[pos % spec.clients].push(ix);
            }
            for shard in &mut shards {
                shard.sort_unstable();
            }
            Ok(shards)
        }
        PartitionMode::Dirichlet => {
            let Some(labels) = dataset.labels() else {
                return Err(Error::invalid_argument(
                    "dirichlet partitioning requires class labels",
                ));
            };
            let classes = dataset.num_classes().unwrap_or(0);
            for _ in 0..MAX_RESAMPLE_ATTEMPTS {
                let shards = dirichlet_attempt(labels, classes, spec, &mut rng)?;
                if shards.iter().all(|s| !s.is_empty()) {
                    return Ok(shards);
                }
            }
            Err(Error::PartitionFailure(format!(
                "no non-empty dirichlet split after {MAX_RESAMPLE_ATTEMPTS} attempts \
                 (alpha {}, {} clients, {n} examples)",
                spec.alpha, spec.clients
            )))
        }
    }
}

fn dirichlet_attempt(
    labels: &[usize],
    classes: usize,
    spec: &PartitionSpec,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut shards = vec![Vec::new(); spec.clients];
    for class in 0..classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter_map(|(ix, &l)| (l == class).then_some(ix))
            .collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let proportions: Vec<f64> = if spec.clients == 1 {
            vec![1.0]
        } else {
            Dirichlet::new_with_size(spec.alpha, spec.clients)
                .map_err(|e| Error::invalid_config(format!("dirichlet draw failed: {e}")))?
                .sample(rng)
        };
        // Deal members by cumulative proportion boundaries.
        let total = members.len();
        let mut cut_prev = 0usize;
        let mut cum = 0.0;
        for (client, p) in proportions.iter().enumerate() {
            cum += p;
            let cut = if client + 1 == spec.clients {
                total
            } else {
                (cum * total as f64).round() as usize
            }
            .min(total);
            shards[client].extend_from_slice(&members[cut_prev..cut]);
            cut_prev = cut.max(cut_prev);
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(shards)
}

/// Per-client label histogram plus its total-variation distance from the
/// global label distribution.
#[derive(Debug, Clone, Serialize)]
pub struct ClientHistogram {
    pub client: usize,
    pub examples: usize,
    pub proportions: Vec<f64>,
    pub tv_distance: f64,
}

/// Summary of label heterogeneity across shards.
#[derive(Debug, Clone, Serialize)]
pub struct HeterogeneityReport {
    pub global_proportions: Vec<f64>,
    pub clients: Vec<ClientHistogram>,
    pub mean_tv_distance: f64,
}

/// Compute per-client label histograms and the mean total-variation
/// distance from the global distribution.
pub fn heterogeneity_report(
    labels: &[usize],
    classes: usize,
    shards: &[Vec<usize>],
) -> Result<HeterogeneityReport> {
    if shards.is_empty() {
        return Err(Error::invalid_argument("no shards given"));
    }
    if classes == 0 {
        return Err(Error::invalid_argument("classes must be at least 1"));
    }
    let histogram = |indices: &[usize]| -> Result<Vec<f64>> {
        let mut counts = vec![0usize; classes];
        for &ix in indices {
            let label = *labels
                .get(ix)
                .ok_or_else(|| Error::invalid_argument(format!("index {ix} out of range")))?;
            if label >= classes {
                return Err(Error::invalid_argument(format!(
                    "label {label} out of range for {classes} classes"
                )));
            }
            counts[label] += 1;
        }
        let total = indices.len().max(1) as f64;
        Ok(counts.into_iter().map(|c| c as f64 / total).collect())
    };

    let all: Vec<usize> = shards.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(Error::invalid_argument("all shards are empty"));
    }
    let global = histogram(&all)?;
    let mut clients = Vec::with_capacity(shards.len());
    let mut mean_tv = 0.0;
    for (client, shard) in shards.iter().enumerate() {
        let proportions = histogram(shard)?;
        let tv_distance = 0.5
            * proportions
                .iter()
                .zip(&global)
                .map(|(p, q)| (p - q).abs())
                .sum::<f64>();
        mean_tv += tv_distance / shards.len() as f64;
        clients.push(ClientHistogram {
            client,
            examples: shard.len(),
            proportions,
            tv_distance,
        });
    }
    Ok(HeterogeneityReport {
        global_proportions: global,
        clients,
        mean_tv_distance: mean_tv,
    })
}
