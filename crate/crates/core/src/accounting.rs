//! Closed-form per-round communication and memory cost model.
//!
//! All counts are in parameters, summed over layers, with the shorthand
//! `P = rows * cols`, `L = (rows + cols) * rank`, `Q = rows * rank` per
//! layer. A bytes view at a configurable element width is provided for
//! reporting; the cost model itself is a pure function of the
//! configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Methods covered by the cost model and the round orchestrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fedkrso")]
    FedKrso,
    #[serde(rename = "fedit")]
    FedIt,
    #[serde(rename = "ffa_lora")]
    FfaLora,
    #[serde(rename = "fedfft")]
    FedFft,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FedIt, Method::FfaLora, Method::FedFft, Method::FedKrso];

    pub fn name(&self) -> &'static str {
        match self {
            Method::FedKrso => "fedkrso",
            Method::FedIt => "fedit",
            Method::FfaLora => "ffa_lora",
            Method::FedFft => "fedfft",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Analytic per-round, per-client cost report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub method: Method,
    pub layer_dims: Vec<(usize, usize)>,
    pub rank: usize,
    pub pool_size: usize,
    pub intervals: usize,
    /// Client-to-server parameters; an upper bound for fedkrso, exact for
    /// the other methods.
    pub uplink_params: usize,
    pub downlink_params: usize,
    pub weight_params: usize,
    pub gradient_params: usize,
    pub optstate_params: usize,
}

impl CostReport {
    pub fn bytes(&self, element_width: usize) -> CostBytes {
        CostBytes {
            uplink: self.uplink_params * element_width,
            downlink: self.downlink_params * element_width,
            weights: self.weight_params * element_width,
            gradients: self.gradient_params * element_width,
            optstate: self.optstate_params * element_width,
        }
    }
}

/// Byte view of a [`CostReport`] at a fixed element width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostBytes {
    pub uplink: usize,
    pub downlink: usize,
    pub weights: usize,
    pub gradients: usize,
    pub optstate: usize,
}

fn check_dims(layer_dims: &[(usize, usize)], rank: usize) -> Result<()> {
    if layer_dims.is_empty() {
        return Err(Error::invalid_config("at least one layer required"));
    }
    if layer_dims.iter().any(|&(r, c)| r == 0 || c == 0) {
        return Err(Error::invalid_config("layer dimensions must be positive"));
    }
    if rank == 0 {
        return Err(Error::invalid_config("rank must be at least 1"));
    }
    Ok(())
}

fn totals(layer_dims: &[(usize, usize)], rank: usize) -> (usize, usize, usize) {
    let full: usize = layer_dims.iter().map(|&(r, c)| r * c).sum();
    let adapter: usize = layer_dims.iter().map(|&(r, c)| (r + c) * rank).sum();
    let block: usize = layer_dims.iter().map(|&(r, _)| r * rank).sum();
    (full, adapter, block)
}

/// Per-round communication and memory costs for one method.
///
/// `rank` is the sketch rank for fedkrso and the adapter rank for the
/// low-rank baselines; `pool_size` and `intervals` only affect fedkrso.
pub fn round_costs(
    method: Method,
    layer_dims: &[(usize, usize)],
    rank: usize,
    pool_size: usize,
    intervals: usize,
) -> Result<CostReport> {
    check_dims(layer_dims, rank)?;
    if method == Method::FedKrso && (pool_size == 0 || intervals == 0) {
        return Err(Error::invalid_config(
            "fedkrso costs require pool_size >= 1 and intervals >= 1",
        ));
    }
    let (full, adapter, block) = totals(layer_dims, rank);
    let (uplink, downlink) = match method {
        // Uploads are bounded by one block per interval; the broadcast is
        // one block per pool seed plus the seeds themselves.
        Method::FedKrso => (intervals * block, pool_size * block + pool_size),
        Method::FedIt => (adapter, adapter),
        Method::FfaLora => (block, block),
        Method::FedFft => (full, full),
    };
    let (weights, gradients, optstate) = memory_rows(method, full, adapter, block);
    Ok(CostReport {
        method,
        layer_dims: layer_dims.to_vec(),
        rank,
        pool_size,
        intervals,
        uplink_params: uplink,
        downlink_params: downlink,
        weight_params: weights,
        gradient_params: gradients,
        optstate_params: optstate,
    })
}

/// Memory footprint rows (weights, gradients, optimizer states) for one
/// method.
pub fn memory_footprint(
    method: Method,
    layer_dims: &[(usize, usize)],
    rank: usize,
) -> Result<(usize, usize, usize)> {
    check_dims(layer_dims, rank)?;
    let (full, adapter, block) = totals(layer_dims, rank);
    Ok(memory_rows(method, full, adapter, block))
}

fn memory_rows(method: Method, full: usize, adapter: usize, block: usize) -> (usize, usize, usize) {
    match method {
        Method::FedKrso => (full + adapter, block, 2 * block),
        Method::FedIt => (full + adapter, adapter, 2 * adapter),
        Method::FfaLora => (full + adapter, block, 2 * block),
        Method::FedFft => (full, full, 2 * full),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: [(usize, usize); 1] = [(768, 768)];

    #[test]
    fn reference_layer_arithmetic() {
        // Q = 3072, L = 6144, P = 589824 at rows = cols = 768, rank = 4.
        let report = round_costs(Method::FedKrso, &DIMS, 4, 10, 5).unwrap();
        assert_eq!(report.downlink_params, 10 * 3072 + 10);
        assert_eq!(report.uplink_params, 5 * 3072);
        assert_eq!(report.weight_params, 589_824 + 6_144);
        assert_eq!(report.gradient_params, 3_072);
        assert_eq!(report.optstate_params, 6_144);
    }

    #[test]
    fn full_fine_tuning_moves_whole_model() {
        let report = round_costs(Method::FedFft, &DIMS, 4, 1, 1).unwrap();
        assert_eq!(report.uplink_params, 589_824);
        assert_eq!(report.downlink_params, 589_824);
        assert_eq!(
            (report.weight_params, report.gradient_params, report.optstate_params),
            (589_824, 589_824, 1_179_648)
        );
    }

    #[test]
    fn adapter_baselines_match_their_rows() {
        let fedit = round_costs(Method::FedIt, &DIMS, 4, 1, 1).unwrap();
        assert_eq!(fedit.uplink_params, 6_144);
        assert_eq!(
            (fedit.weight_params, fedit.gradient_params, fedit.optstate_params),
            (595_968, 6_144, 12_288)
        );
        let ffa = round_costs(Method::FfaLora, &DIMS, 4, 1, 1).unwrap();
        assert_eq!(ffa.uplink_params, 3_072);
        assert_eq!(
            (ffa.weight_params, ffa.gradient_params, ffa.optstate_params),
            (595_968, 3_072, 6_144)
        );
    }

    #[test]
    fn compressed_state_is_smaller_whenever_rank_is_narrower() {
        // 3Q < 3P whenever rank < cols.
        let (_, _, block) = totals(&DIMS, 4);
        let (full, _, _) = totals(&DIMS, 4);
        assert!(3 * block < 3 * full);
    }

    #[test]
    fn zero_rank_is_rejected() {
        assert!(round_costs(Method::FedKrso, &DIMS, 0, 10, 5).is_err());
        assert!(memory_footprint(Method::FedFft, &DIMS, 0).is_err());
    }

    #[test]
    fn fedkrso_requires_pool_and_intervals() {
        assert!(round_costs(Method::FedKrso, &DIMS, 4, 0, 5).is_err());
        assert!(round_costs(Method::FedKrso, &DIMS, 4, 10, 0).is_err());
    }

    #[test]
    fn multi_layer_costs_sum() {
        let dims = [(64, 48), (48, 8)];
        let report = round_costs(Method::FedKrso, &dims, 2, 3, 2).unwrap();
        let block = 64 * 2 + 48 * 2;
        assert_eq!(report.uplink_params, 2 * block);
        assert_eq!(report.downlink_params, 3 * block + 3);
    }

    #[test]
    fn bytes_view_scales_by_width() {
        let report = round_costs(Method::FfaLora, &DIMS, 4, 1, 1).unwrap();
        let b8 = report.bytes(8);
        let b2 = report.bytes(2);
        assert_eq!(b8.uplink, 4 * b2.uplink);
        assert_eq!(b8.uplink, 8 * report.uplink_params);
    }
}
