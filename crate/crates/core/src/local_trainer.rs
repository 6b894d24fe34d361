//! Memory-efficient local training.
//!
//! A round of local work is `intervals` intervals of `interval_len`
//! iterations. At each interval boundary the client draws one seed from the
//! broadcast pool, regenerates the projection, and zeroes the moment
//! buffers. Within an interval every iteration computes the compressed
//! gradient on a fresh mini-batch, preconditions it, updates the weights in
//! place, and subtracts the same step from the per-seed accumulator. At the
//! end the accumulated products are subtracted from the weights, restoring
//! the entry model so the next round can be reconstructed from accumulators
//! alone.
//!
//! The weight matrices are the only full-size buffers the client holds;
//! every other live buffer is batch-sized or `rank`-wide.

use std::collections::BTreeMap;

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::memtrace;
use crate::rng::{self, Stream};
use crate::sketch::{gen_layer_projections, SeedPool, SketchKind};
use crate::tasks::{Batch, TaskModel, WeightSet};

/// Per-iteration learning-rate multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from 1 to 0 across `total_steps`.
    Cosine { total_steps: usize },
}

impl LrSchedule {
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { total_steps } => {
                let total = total_steps.max(1);
                let t = step.min(total) as f64 / total as f64;
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Settings of one local-training call.
#[derive(Debug, Clone)]
pub struct LocalConfig {
    pub intervals: usize,
    pub interval_len: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub momentum_enabled: bool,
    /// Time-indexed bias correction (`1 - beta^t`) instead of the fixed
    /// divisors (`1 - beta`).
    pub standard_bias_correction: bool,
    pub batch_size: usize,
    pub sketch_rank: usize,
    pub sketch_kind: SketchKind,
    pub schedule: LrSchedule,
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.intervals == 0 {
            return Err(Error::invalid_config("intervals must be at least 1"));
        }
        if self.interval_len == 0 {
            return Err(Error::invalid_config("interval_len must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid_config("learning_rate must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid_config("beta1 and beta2 must be in [0, 1)"));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::invalid_config("epsilon must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_config("batch_size must be at least 1"));
        }
        if self.sketch_rank == 0 {
            return Err(Error::invalid_config("sketch_rank must be at least 1"));
        }
        Ok(())
    }
}

/// First and second moments of the gradient blocks being stepped, one pair
/// per layer. Reset to zero at every interval boundary.
#[derive(Debug, Clone)]
pub struct MomentState {
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    steps: usize,
}

impl MomentState {
    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        let first: Vec<_> = shapes
            .iter()
            .map(|&(rows, cols)| linalg::tracked_zeros(rows, cols))
            .collect();
        let second = first.clone();
        MomentState {
            first,
            second,
            steps: 0,
        }
    }

    pub fn reset(&mut self) {
        for m in self.first.iter_mut().chain(self.second.iter_mut()) {
            m.fill(0.0);
        }
        self.steps = 0;
    }

    pub fn first(&self) -> &[Array2<f64>] {
        &self.first
    }

    pub fn second(&self) -> &[Array2<f64>] {
        &self.second
    }
}

/// One optimizer step on the compressed gradient. Updates the moments and
/// returns the preconditioned blocks; with momentum disabled the input is
/// returned unchanged and the state stays zero.
pub fn moment_step(
    state: &mut MomentState,
    blocks: &[Array2<f64>],
    cfg: &LocalConfig,
) -> Vec<Array2<f64>> {
    assert_eq!(blocks.len(), state.first.len(), "layer count mismatch");
    if !cfg.momentum_enabled {
        let out = blocks.to_vec();
        for b in &out {
            memtrace::record(b.len());
        }
        return out;
    }
    state.steps += 1;
    let (c1, c2) = if cfg.standard_bias_correction {
        (
            1.0 - cfg.beta1.powi(state.steps as i32),
            1.0 - cfg.beta2.powi(state.steps as i32),
        )
    } else {
        (1.0 - cfg.beta1, 1.0 - cfg.beta2)
    };
    let mut out = Vec::with_capacity(blocks.len());
    for (layer, g) in blocks.iter().enumerate() {
        let m = &mut state.first[layer];
        let v = &mut state.second[layer];
        assert_eq!(m.dim(), g.dim(), "moment shape mismatch");
        m.zip_mut_with(g, |mv, &gv| *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv);
        v.zip_mut_with(g, |vv, &gv| *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv);
        let mut p = m.clone();
        memtrace::record(p.len());
        p.zip_mut_with(v, |pv, &vv| {
            *pv = (*pv / c1) / ((vv / c2).sqrt() + cfg.epsilon);
        });
        out.push(p);
    }
    out
}

/// The per-seed model-update accumulators of one client for one round.
/// Blocks exist only for seeds actually sampled; absent blocks are zero.
#[derive(Debug, Clone)]
pub struct LocalAccumulatorSet {
    pool_size: usize,
    rank: usize,
    layer_dims: Vec<(usize, usize)>,
    blocks: BTreeMap<usize, Vec<Array2<f64>>>,
}

impl LocalAccumulatorSet {
    pub fn new(pool_size: usize, rank: usize, layer_dims: Vec<(usize, usize)>) -> Self {
        LocalAccumulatorSet {
            pool_size,
            rank,
            layer_dims,
            blocks: BTreeMap::new(),
        }
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn layer_dims(&self) -> &[(usize, usize)] {
        &self.layer_dims
    }

    /// Seed indices sampled this round, ascending.
    pub fn touched(&self) -> Vec<usize> {
        self.blocks.keys().copied().collect()
    }

    pub fn block(&self, seed_index: usize) -> Option<&[Array2<f64>]> {
        self.blocks.get(&seed_index).map(Vec::as_slice)
    }

    /// Insert or replace one seed's block, validating shapes. This is the
    /// ingestion path for accumulator sets received off the wire.
    pub fn set_block(&mut self, seed_index: usize, blocks: Vec<Array2<f64>>) -> Result<()> {
        if seed_index >= self.pool_size {
            return Err(Error::invalid_argument(format!(
                "seed index {seed_index} out of range for pool of {}",
                self.pool_size
            )));
        }
        if blocks.len() != self.layer_dims.len() {
            return Err(Error::invalid_argument(format!(
                "expected {} layer blocks, got {}",
                self.layer_dims.len(),
                blocks.len()
            )));
        }
        for (b, &(rows, _)) in blocks.iter().zip(&self.layer_dims) {
            if b.dim() != (rows, self.rank) {
                return Err(Error::invalid_argument(format!(
                    "block shape {:?} does not match ({rows}, {})",
                    b.dim(),
                    self.rank
                )));
            }
        }
        self.blocks.insert(seed_index, blocks);
        Ok(())
    }

    fn block_mut_or_insert(&mut self, seed_index: usize) -> &mut Vec<Array2<f64>> {
        debug_assert!(seed_index < self.pool_size);
        let (dims, rank) = (&self.layer_dims, self.rank);
        self.blocks.entry(seed_index).or_insert_with(|| {
            dims.iter()
                .map(|&(rows, _)| linalg::tracked_zeros(rows, rank))
                .collect()
        })
    }

    /// Parameters a client uploads: one `rows x rank` block per layer per
    /// touched seed. Seed-index tags are integers, not parameters.
    pub fn uplink_params(&self) -> usize {
        let per_seed: usize = self.layer_dims.iter().map(|&(rows, _)| rows * self.rank).sum();
        self.blocks.len() * per_seed
    }
}

/// Identity of one local-training call inside a run; drives the named
/// randomness streams and the schedule position.
#[derive(Debug, Clone, Copy)]
pub struct LocalRunContext {
    pub master_seed: u64,
    pub client_id: usize,
    pub round: usize,
    /// Local iterations already executed in previous rounds.
    pub global_step_offset: usize,
    /// Keep a copy of the pre-reset model (costs one full weight set).
    pub capture_pre_reset: bool,
}

/// What a local-training call hands back to the orchestrator.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub accumulators: LocalAccumulatorSet,
    /// Pre-reset model, present only when captured.
    pub pre_reset: Option<WeightSet>,
    /// Pool index drawn for each interval.
    pub seed_draws: Vec<usize>,
}

/// Mini-batch order: without replacement within an epoch, reshuffled per
/// epoch, seeded per (client, round). A partial tail shorter than the batch
/// size is dropped. Shared by every method so matched runs consume
/// identical batch streams.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(shard: &[usize], batch_size: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order = shard.to_vec();
        order.shuffle(&mut rng);
        BatchSampler {
            batch: batch_size.min(order.len()),
            order,
            cursor: 0,
            rng,
        }
    }

    /// Sampler keyed by the canonical per-(client, round) stream.
    pub fn for_client_round(
        shard: &[usize],
        batch_size: usize,
        master_seed: u64,
        client_id: usize,
        round: usize,
    ) -> Self {
        let rng = rng::stream_rng(
            master_seed,
            Stream::Batches,
            &[client_id as u64, round as u64],
        );
        BatchSampler::new(shard, batch_size, rng)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let s = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        s
    }
}

/// Run one round of local training, mutating `weights` in place. On return
/// the weights are restored to their entry value; the model change is fully
/// encoded by the returned accumulators as `sum_k B_k P_k`.
pub fn local_training(
    task: &TaskModel,
    weights: &mut WeightSet,
    pool: &SeedPool,
    shard: &[usize],
    cfg: &LocalConfig,
    ctx: &LocalRunContext,
) -> Result<LocalOutcome> {
    cfg.validate()?;
    if shard.is_empty() {
        return Err(Error::invalid_argument("local_training: empty shard"));
    }
    let layer_dims = task.layer_dims();
    if weights.dims() != layer_dims {
        return Err(Error::invalid_argument(
            "local_training: weight shapes do not match the task",
        ));
    }
    let layer_cols: Vec<usize> = layer_dims.iter().map(|&(_, c)| c).collect();
    let pool_size = pool.len();

    let mut seed_rng = rng::stream_rng(
        ctx.master_seed,
        Stream::SeedChoice,
        &[ctx.client_id as u64, ctx.round as u64],
    );
    let mut sampler = BatchSampler::for_client_round(
        shard,
        cfg.batch_size,
        ctx.master_seed,
        ctx.client_id,
        ctx.round,
    );

    let mut acc = LocalAccumulatorSet::new(pool_size, cfg.sketch_rank, layer_dims.clone());
    let moment_shapes: Vec<(usize, usize)> = layer_dims
        .iter()
        .map(|&(rows, _)| (rows, cfg.sketch_rank))
        .collect();
    let mut moments = MomentState::zeros(&moment_shapes);
    let mut seed_draws = Vec::with_capacity(cfg.intervals);
    let mut global_step = ctx.global_step_offset;

    for interval in 0..cfg.intervals {
        let k = seed_rng.gen_range(0..pool_size);
        seed_draws.push(k);
        let projections =
            gen_layer_projections(pool.seed(k), cfg.sketch_rank, &layer_cols, cfg.sketch_kind)?;
        moments.reset();

        for iteration in 0..cfg.interval_len {
            let batch_indices = sampler.next_batch();
            let batch = Batch::new(&batch_indices)?;
            let compressed = task.grad_b(weights, &projections, &batch)?;
            if compressed.iter().any(|b| !linalg::all_finite(b)) {
                return Err(Error::Diverged {
                    round: ctx.round,
                    client: ctx.client_id,
                    interval,
                    iteration,
                });
            }
            let step_blocks = moment_step(&mut moments, &compressed, cfg);
            let eta = cfg.learning_rate * cfg.schedule.factor(global_step);

            // In-place W -= eta * G P, then the matching accumulator update,
            // so weights and accumulators always describe the same iterate.
            for (layer, (step, proj)) in step_blocks.iter().zip(&projections).enumerate() {
                general_mat_mul(-eta, step, proj.entries(), 1.0, weights.matrix_mut(layer));
            }
            let blocks = acc.block_mut_or_insert(k);
            for (block, step) in blocks.iter_mut().zip(&step_blocks) {
                block.scaled_add(-eta, step);
            }
            global_step += 1;
        }
        if !weights.is_finite() {
            return Err(Error::Diverged {
                round: ctx.round,
                client: ctx.client_id,
                interval,
                iteration: cfg.interval_len,
            });
        }
    }

    let pre_reset = ctx.capture_pre_reset.then(|| weights.clone());

    // Weight reset: subtract the accumulated products, restoring the entry
    // model. Projections are regenerated from seeds, never stored.
    for k in acc.touched() {
        let projections =
            gen_layer_projections(pool.seed(k), cfg.sketch_rank, &layer_cols, cfg.sketch_kind)?;
        let blocks = acc.block(k).expect("touched block exists");
        for (layer, (block, proj)) in blocks.iter().zip(&projections).enumerate() {
            general_mat_mul(-1.0, block, proj.entries(), 1.0, weights.matrix_mut(layer));
        }
    }

    Ok(LocalOutcome {
        accumulators: acc,
        pre_reset,
        seed_draws,
    })
}

/// Peak parameter count a client holds during one iteration: the weights
/// plus one projection and compressed-gradient factor pair, plus the two
/// moment buffers, summed over layers.
pub fn peak_state_parameter_count(layer_dims: &[(usize, usize)], rank: usize) -> Result<usize> {
    if rank == 0 {
        return Err(Error::invalid_config("rank must be at least 1"));
    }
    Ok(layer_dims
        .iter()
        .map(|&(rows, cols)| rows * cols + (rows + cols) * rank + 3 * rows * rank)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn base_cfg() -> LocalConfig {
        LocalConfig {
            intervals: 1,
            interval_len: 4,
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum_enabled: true,
            standard_bias_correction: false,
            batch_size: 4,
            sketch_rank: 2,
            sketch_kind: SketchKind::Gaussian,
            schedule: LrSchedule::Constant,
        }
    }

    #[test]
    fn degenerate_decay_normalizes_entrywise() {
        let mut cfg = base_cfg();
        cfg.beta1 = 0.0;
        cfg.beta2 = 0.0;
        let mut state = MomentState::zeros(&[(2, 3)]);
        let g = vec![array![[1.0, -2.0, 0.5], [0.0, 4.0, -0.25]]];
        let out = moment_step(&mut state, &g, &cfg);
        for (o, gv) in out[0].iter().zip(g[0].iter()) {
            let expect = gv / (gv.abs() + cfg.epsilon);
            assert!((o - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn disabled_momentum_is_a_bypass() {
        let cfg = LocalConfig {
            momentum_enabled: false,
            ..base_cfg()
        };
        let mut state = MomentState::zeros(&[(2, 2)]);
        let g = vec![array![[1.0, 2.0], [3.0, 4.0]]];
        let out = moment_step(&mut state, &g, &cfg);
        assert_eq!(out[0], g[0]);
        assert!(state.first()[0].iter().all(|&v| v == 0.0));
        assert!(state.second()[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_steps_match_hand_rolled_recurrence() {
        let cfg = base_cfg();
        let mut state = MomentState::zeros(&[(1, 1)]);
        let g = vec![array![[1.0]]];
        let out1 = moment_step(&mut state, &g, &cfg)[0][(0, 0)];
        let out2 = moment_step(&mut state, &g, &cfg)[0][(0, 0)];

        // Direct evaluation of the recurrence with constant unit input.
        let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.epsilon);
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for _ in 0..2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            expected.push((m / (1.0 - b1)) / ((v / (1.0 - b2)).sqrt() + eps));
        }
        assert!((out1 - expected[0]).abs() < 1e-12);
        assert!((out2 - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn standard_bias_correction_uses_step_index() {
        let mut cfg = base_cfg();
        cfg.standard_bias_correction = true;
        let mut state = MomentState::zeros(&[(1, 1)]);
        let g = vec![array![[1.0]]];
        let out1 = moment_step(&mut state, &g, &cfg)[0][(0, 0)];
        // First step of time-indexed correction recovers the raw gradient
        // direction: m_hat = v_hat = 1.
        assert!((out1 - 1.0 / (1.0 + cfg.epsilon)).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_spans_one_to_zero() {
        let s = LrSchedule::Cosine { total_steps: 100 };
        assert!((s.factor(0) - 1.0).abs() < 1e-15);
        assert!((s.factor(50) - 0.5).abs() < 1e-15);
        assert!(s.factor(100) < 1e-15);
        assert!(s.factor(1000) < 1e-15);
    }

    #[test]
    fn peak_state_count_matches_formula() {
        let count = peak_state_parameter_count(&[(768, 768)], 4).unwrap();
        assert_eq!(count, 589_824 + 6_144 + 9_216);
    }

    #[test]
    fn peak_state_count_is_additive_over_layers() {
        let one = peak_state_parameter_count(&[(64, 48)], 4).unwrap();
        let two = peak_state_parameter_count(&[(64, 48), (64, 48)], 4).unwrap();
        assert_eq!(two, 2 * one);
    }

    #[test]
    fn peak_state_count_rejects_zero_rank() {
        assert!(peak_state_parameter_count(&[(8, 8)], 0).is_err());
    }

    #[test]
    fn sampler_covers_epoch_without_replacement() {
        let shard: Vec<usize> = (0..10).collect();
        let rng = rng::rng_from_seed(5);
        let mut sampler = BatchSampler::new(&shard, 5, rng);
        let mut seen: Vec<usize> = Vec::new();
        seen.extend(sampler.next_batch());
        seen.extend(sampler.next_batch());
        seen.sort_unstable();
        assert_eq!(seen, shard);
    }

    #[test]
    fn sampler_clamps_batch_to_shard() {
        let shard = vec![3, 4, 5];
        let rng = rng::rng_from_seed(5);
        let mut sampler = BatchSampler::new(&shard, 16, rng);
        let mut b = sampler.next_batch();
        b.sort_unstable();
        assert_eq!(b, shard);
    }
}
