//! Round orchestration: seed/accumulator broadcast, client-side model
//! reconstruction, local training, per-seed aggregation, and trace
//! collection, plus the full fine-tuning and low-rank adapter baselines.
//!
//! The server's protocol state is only the seed pool and the global
//! accumulator set; full weights appear server-side solely inside the
//! shadow evaluator, a separate component used to measure global loss and
//! to verify reconstruction.

use std::time::Instant;

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use rayon::prelude::*;

use crate::accounting::Method;
use crate::config::{RunConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::linalg;
use crate::local_trainer::{
    local_training, moment_step, BatchSampler, LocalAccumulatorSet, LocalConfig, LocalRunContext,
    LrSchedule, MomentState,
};
use crate::partitioner::{self, PartitionSpec};
use crate::rng::{self, Stream};
use crate::sketch::{gen_layer_projections, gen_projection, make_seed_pool, Seed, SeedPool, SketchKind};
use crate::tasks::{self, Batch, TaskModel, WeightSet};

/// The server's per-seed accumulators for one round; `round == t` means the
/// blocks are `B^t`, to be applied with the pool of round `t - 1`.
#[derive(Debug, Clone)]
pub struct GlobalAccumulatorSet {
    round: usize,
    rank: usize,
    layer_dims: Vec<(usize, usize)>,
    blocks: Vec<Vec<Array2<f64>>>,
}

impl GlobalAccumulatorSet {
    pub fn zeros(
        round: usize,
        pool_size: usize,
        rank: usize,
        layer_dims: Vec<(usize, usize)>,
    ) -> Self {
        let blocks = (0..pool_size)
            .map(|_| {
                layer_dims
                    .iter()
                    .map(|&(rows, _)| Array2::zeros((rows, rank)))
                    .collect()
            })
            .collect();
        GlobalAccumulatorSet {
            round,
            rank,
            layer_dims,
            blocks,
        }
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn pool_size(&self) -> usize {
        self.blocks.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn block(&self, seed_index: usize) -> &[Array2<f64>] {
        &self.blocks[seed_index]
    }
}

/// Average the client accumulators seed by seed; blocks a client never
/// touched count as zero.
pub fn aggregate(
    client_accs: &[LocalAccumulatorSet],
    expected_clients: usize,
    round: usize,
) -> Result<GlobalAccumulatorSet> {
    if client_accs.is_empty() || client_accs.len() != expected_clients {
        return Err(Error::protocol(format!(
            "aggregate: expected {expected_clients} client reports, got {}",
            client_accs.len()
        )));
    }
    let first = &client_accs[0];
    let (pool_size, rank) = (first.pool_size(), first.rank());
    let layer_dims = first.layer_dims().to_vec();
    for acc in client_accs {
        if acc.pool_size() != pool_size || acc.rank() != rank || acc.layer_dims() != layer_dims {
            return Err(Error::protocol(
                "aggregate: client accumulator shapes disagree",
            ));
        }
    }
    let mut global = GlobalAccumulatorSet::zeros(round, pool_size, rank, layer_dims);
    let weight = 1.0 / expected_clients as f64;
    for acc in client_accs {
        for k in acc.touched() {
            let blocks = acc.block(k).expect("touched block exists");
            for (dst, src) in global.blocks[k].iter_mut().zip(blocks) {
                dst.scaled_add(weight, src);
            }
        }
    }
    Ok(global)
}

/// Apply `W += sum_k B_k P_k` in place, regenerating each projection from
/// the previous round's pool. With `round == 0` the accumulators are the
/// all-zero initialization and no pool exists yet.
pub fn reconstruct_into(
    weights: &mut WeightSet,
    acc: &GlobalAccumulatorSet,
    prev_pool: Option<&SeedPool>,
    kind: SketchKind,
) -> Result<()> {
    if weights.dims() != acc.layer_dims {
        return Err(Error::protocol(
            "reconstruct: weight shapes do not match accumulators",
        ));
    }
    if acc.round == 0 {
        if prev_pool.is_some() {
            return Err(Error::protocol(
                "reconstruct: no pool precedes round 0 accumulators",
            ));
        }
        return Ok(());
    }
    let pool = prev_pool.ok_or_else(|| {
        Error::protocol(format!(
            "reconstruct: accumulators of round {} need the pool of round {}",
            acc.round,
            acc.round - 1
        ))
    })?;
    if pool.round() + 1 != acc.round {
        return Err(Error::protocol(format!(
            "reconstruct: accumulators of round {} paired with pool of round {}",
            acc.round,
            pool.round()
        )));
    }
    if pool.len() != acc.pool_size() {
        return Err(Error::protocol(
            "reconstruct: pool size does not match accumulators",
        ));
    }
    let layer_cols: Vec<usize> = acc.layer_dims.iter().map(|&(_, c)| c).collect();
    for (k, blocks) in acc.blocks.iter().enumerate() {
        let projections = gen_layer_projections(pool.seed(k), acc.rank, &layer_cols, kind)?;
        for (layer, (block, proj)) in blocks.iter().zip(&projections).enumerate() {
            general_mat_mul(1.0, block, proj.entries(), 1.0, weights.matrix_mut(layer));
        }
    }
    Ok(())
}

/// Out-of-place variant of [`reconstruct_into`].
pub fn reconstruct_global(
    w_prev: &WeightSet,
    acc: &GlobalAccumulatorSet,
    prev_pool: Option<&SeedPool>,
    kind: SketchKind,
) -> Result<WeightSet> {
    let mut w = w_prev.clone();
    reconstruct_into(&mut w, acc, prev_pool, kind)?;
    Ok(w)
}

/// One client of the simulation.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub weights: WeightSet,
    pub shard: Vec<usize>,
    /// The previous round's pool, cached for reconstruction.
    pub prev_pool: Option<SeedPool>,
}

/// Metrics and costs of one completed round. Losses and gradient norms are
/// measured at the post-aggregation global model.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub global_loss: f64,
    pub grad_norm_sq: f64,
    /// Worst-client measured uplink parameters.
    pub uplink_params: usize,
    /// Per-client downlink parameters.
    pub downlink_params: usize,
    pub seconds: f64,
    pub per_client_uplink: Vec<usize>,
    /// Draw count per pool seed over all clients and intervals.
    pub seed_usage: Vec<u64>,
    /// Max client deviation from the shadow model at reconstruction.
    pub reconstruction_dev: Option<f64>,
    /// Max client deviation of the post-reset from the entry model.
    pub reset_dev: Option<f64>,
    /// Deviation of the averaged pre-reset models from the shadow update.
    pub aggregation_dev: Option<f64>,
}

/// Everything a run leaves behind, in memory.
#[derive(Debug, Clone)]
pub struct TrainingTrace {
    pub method: Method,
    pub rounds: Vec<RoundRecord>,
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    pub final_weights: WeightSet,
    pub total_seconds: f64,
}

/// Dispatch a run by the configured method.
pub fn run(config: &RunConfig) -> Result<TrainingTrace> {
    match config.federation.method {
        Method::FedKrso => run_fedkrso(config),
        Method::FedFft => run_fedfft(config),
        Method::FedIt | Method::FfaLora => run_fedlora(config),
    }
}

struct RunSetup {
    task: TaskModel,
    shards: Vec<Vec<usize>>,
    init: WeightSet,
    schedule: LrSchedule,
}

fn prepare(config: &RunConfig) -> Result<RunSetup> {
    config.validate()?;
    let task = tasks::build_task(&config.task, config.master_seed)?;
    let spec = PartitionSpec {
        mode: config.partition.mode,
        alpha: config.partition.alpha,
        clients: config.federation.clients,
        seed: Seed(config.master_seed),
    };
    let shards = partitioner::split(task.dataset(), &spec)?;
    let init = task.init_weights();
    let schedule = match config.local.schedule {
        ScheduleKind::Constant => LrSchedule::Constant,
        ScheduleKind::Cosine => LrSchedule::Cosine {
            total_steps: config.total_local_steps(),
        },
    };
    Ok(RunSetup {
        task,
        shards,
        init,
        schedule,
    })
}

fn local_config(config: &RunConfig, schedule: LrSchedule) -> LocalConfig {
    LocalConfig {
        intervals: config.federation.intervals,
        interval_len: config.federation.interval_len,
        learning_rate: config.local.learning_rate,
        beta1: config.local.beta1,
        beta2: config.local.beta2,
        epsilon: config.local.epsilon,
        momentum_enabled: config.local.momentum,
        standard_bias_correction: config.local.standard_bias_correction,
        batch_size: config.local.batch_size,
        sketch_rank: config.federation.sketch_rank,
        sketch_kind: config.federation.sketch_kind,
        schedule,
    }
}

fn eval_global(
    task: &TaskModel,
    weights: &WeightSet,
    shards: &[Vec<usize>],
) -> Result<(f64, f64)> {
    let loss = task.global_loss(weights, shards)?;
    let grad = task.global_grad(weights, shards)?;
    Ok((loss, grad.norm().powi(2)))
}

struct KrsoClientResult {
    accumulators: LocalAccumulatorSet,
    pre_reset: Option<WeightSet>,
    seed_draws: Vec<usize>,
    reconstruction_dev: Option<f64>,
    reset_dev: Option<f64>,
}

/// K-seed random-subspace federated optimization.
pub fn run_fedkrso(config: &RunConfig) -> Result<TrainingTrace> {
    let setup = prepare(config)?;
    let fed = &config.federation;
    let verify = &config.verify;
    let cfg = local_config(config, setup.schedule);
    let kind = fed.sketch_kind;
    let layer_dims = setup.init.dims();
    let per_seed_block: usize = layer_dims
        .iter()
        .map(|&(rows, _)| rows * fed.sketch_rank)
        .sum();
    let downlink = fed.seed_count * per_seed_block + fed.seed_count;
    let steps_per_round = fed.intervals * fed.interval_len;
    let debug_entry = verify.check_round_sync || verify.debug_pre_reset;

    let mut clients: Vec<ClientState> = setup
        .shards
        .iter()
        .enumerate()
        .map(|(client_id, shard)| ClientState {
            client_id,
            weights: setup.init.clone(),
            shard: shard.clone(),
            prev_pool: None,
        })
        .collect();
    let mut server_acc =
        GlobalAccumulatorSet::zeros(0, fed.seed_count, fed.sketch_rank, layer_dims.clone());
    let mut shadow = setup.init.clone();
    let mut records = Vec::with_capacity(fed.rounds);
    let run_start = Instant::now();

    for round in 0..fed.rounds {
        let round_start = Instant::now();
        let pool = make_seed_pool(Seed(config.master_seed), round, fed.seed_count)?;

        let results: Vec<Result<KrsoClientResult>> = clients
            .par_iter_mut()
            .map(|client| {
                reconstruct_into(
                    &mut client.weights,
                    &server_acc,
                    client.prev_pool.as_ref(),
                    kind,
                )?;
                let reconstruction_dev = verify
                    .check_round_sync
                    .then(|| client.weights.rel_distance(&shadow));
                let entry = debug_entry.then(|| client.weights.clone());
                let ctx = LocalRunContext {
                    master_seed: config.master_seed,
                    client_id: client.client_id,
                    round,
                    global_step_offset: round * steps_per_round,
                    capture_pre_reset: verify.debug_pre_reset,
                };
                let outcome = local_training(
                    &setup.task,
                    &mut client.weights,
                    &pool,
                    &client.shard,
                    &cfg,
                    &ctx,
                )?;
                let reset_dev = entry.as_ref().map(|e| client.weights.rel_distance(e));
                client.prev_pool = Some(pool.clone());
                Ok(KrsoClientResult {
                    accumulators: outcome.accumulators,
                    pre_reset: outcome.pre_reset,
                    seed_draws: outcome.seed_draws,
                    reconstruction_dev,
                    reset_dev,
                })
            })
            .collect();
        let mut client_results = Vec::with_capacity(results.len());
        for r in results {
            client_results.push(r?);
        }

        let per_client_uplink: Vec<usize> = client_results
            .iter()
            .map(|r| r.accumulators.uplink_params())
            .collect();
        let mut seed_usage = vec![0u64; fed.seed_count];
        for r in &client_results {
            for &k in &r.seed_draws {
                seed_usage[k] += 1;
            }
        }
        let reconstruction_dev = fold_max(client_results.iter().map(|r| r.reconstruction_dev));
        let reset_dev = fold_max(client_results.iter().map(|r| r.reset_dev));

        let accs: Vec<LocalAccumulatorSet> = client_results
            .iter()
            .map(|r| r.accumulators.clone())
            .collect();
        server_acc = aggregate(&accs, fed.clients, round + 1)?;

        // Shadow evaluator follows the same reconstruction rule the clients
        // will apply next round.
        reconstruct_into(&mut shadow, &server_acc, Some(&pool), kind)?;

        let aggregation_dev = if verify.debug_pre_reset {
            let mut mean = setup.init.zeros_like();
            for r in &client_results {
                let pre = r.pre_reset.as_ref().expect("captured in debug mode");
                mean.add_scaled(pre, 1.0 / fed.clients as f64);
            }
            Some(mean.rel_distance(&shadow))
        } else {
            None
        };

        let (global_loss, grad_norm_sq) = eval_global(&setup.task, &shadow, &setup.shards)?;
        records.push(RoundRecord {
            round,
            global_loss,
            grad_norm_sq,
            uplink_params: per_client_uplink.iter().copied().max().unwrap_or(0),
            downlink_params: downlink,
            seconds: round_start.elapsed().as_secs_f64(),
            per_client_uplink,
            seed_usage,
            reconstruction_dev,
            reset_dev,
            aggregation_dev,
        });
    }

    let last = records.last().expect("at least one round");
    Ok(TrainingTrace {
        method: Method::FedKrso,
        final_loss: last.global_loss,
        final_grad_norm_sq: last.grad_norm_sq,
        rounds: records,
        final_weights: shadow,
        total_seconds: run_start.elapsed().as_secs_f64(),
    })
}

/// FedAvg with full-gradient local steps: the performance upper bound.
pub fn run_fedfft(config: &RunConfig) -> Result<TrainingTrace> {
    let setup = prepare(config)?;
    let fed = &config.federation;
    let cfg = local_config(config, setup.schedule);
    let layer_dims = setup.init.dims();
    let full_params: usize = layer_dims.iter().map(|&(r, c)| r * c).sum();
    let steps_per_round = fed.intervals * fed.interval_len;

    let mut global = setup.init.clone();
    let mut records = Vec::with_capacity(fed.rounds);
    let run_start = Instant::now();

    for round in 0..fed.rounds {
        let round_start = Instant::now();
        let results: Vec<Result<WeightSet>> = setup
            .shards
            .par_iter()
            .enumerate()
            .map(|(client_id, shard)| {
                let mut w = global.clone();
                let mut moments = MomentState::zeros(&layer_dims);
                let mut sampler = BatchSampler::for_client_round(
                    shard,
                    cfg.batch_size,
                    config.master_seed,
                    client_id,
                    round,
                );
                for step in 0..steps_per_round {
                    let batch_indices = sampler.next_batch();
                    let batch = Batch::new(&batch_indices)?;
                    let grad = setup.task.grad(&w, &batch)?;
                    if !grad.is_finite() {
                        return Err(Error::Diverged {
                            round,
                            client: client_id,
                            interval: 0,
                            iteration: step,
                        });
                    }
                    let update = moment_step(&mut moments, grad.matrices(), &cfg);
                    let eta = cfg.learning_rate
                        * cfg.schedule.factor(round * steps_per_round + step);
                    for (layer, u) in update.iter().enumerate() {
                        w.matrix_mut(layer).scaled_add(-eta, u);
                    }
                }
                Ok(w)
            })
            .collect();

        let mut mean = setup.init.zeros_like();
        for r in results {
            let w = r?;
            mean.add_scaled(&w, 1.0 / fed.clients as f64);
        }
        global = mean;

        let (global_loss, grad_norm_sq) = eval_global(&setup.task, &global, &setup.shards)?;
        records.push(RoundRecord {
            round,
            global_loss,
            grad_norm_sq,
            uplink_params: full_params,
            downlink_params: full_params,
            seconds: round_start.elapsed().as_secs_f64(),
            per_client_uplink: vec![full_params; fed.clients],
            seed_usage: Vec::new(),
            reconstruction_dev: None,
            reset_dev: None,
            aggregation_dev: None,
        });
    }

    let last = records.last().expect("at least one round");
    Ok(TrainingTrace {
        method: Method::FedFft,
        final_loss: last.global_loss,
        final_grad_norm_sq: last.grad_norm_sq,
        rounds: records,
        final_weights: global,
        total_seconds: run_start.elapsed().as_secs_f64(),
    })
}

/// Additive low-rank adapter training on a frozen base model. With the
/// `fedit` method both factors train and both are averaged; with `ffa_lora`
/// the input factor stays frozen at its shared initialization and only the
/// output factor trains and travels.
pub fn run_fedlora(config: &RunConfig) -> Result<TrainingTrace> {
    let method = config.federation.method;
    if !matches!(method, Method::FedIt | Method::FfaLora) {
        return Err(Error::invalid_config(
            "run_fedlora requires federation.method fedit or ffa_lora",
        ));
    }
    let freeze_input_factor = method == Method::FfaLora;
    let setup = prepare(config)?;
    let fed = &config.federation;
    let cfg = local_config(config, setup.schedule);
    let rank = fed.lora_rank;
    let layer_dims = setup.init.dims();
    let steps_per_round = fed.intervals * fed.interval_len;

    // Factor shapes per layer: output factor rows x rank, input factor
    // rank x cols.
    let adapter_params: usize = layer_dims.iter().map(|&(r, c)| (r + c) * rank).sum();
    let block_params: usize = layer_dims.iter().map(|&(r, _)| r * rank).sum();
    let comm = if freeze_input_factor {
        block_params
    } else {
        adapter_params
    };

    let adapter_seed = Seed(rng::derive(config.master_seed, Stream::AdapterInit, &[]));
    let mut global_in: Vec<Array2<f64>> = Vec::with_capacity(layer_dims.len());
    for (layer, &(_, cols)) in layer_dims.iter().enumerate() {
        let p = gen_projection(adapter_seed, rank, cols, fed.lora_init, layer)?;
        global_in.push(p.entries().clone());
    }
    let mut global_out: Vec<Array2<f64>> = layer_dims
        .iter()
        .map(|&(rows, _)| Array2::zeros((rows, rank)))
        .collect();

    let out_shapes: Vec<(usize, usize)> = layer_dims.iter().map(|&(r, _)| (r, rank)).collect();
    let in_shapes: Vec<(usize, usize)> = layer_dims.iter().map(|&(_, c)| (rank, c)).collect();

    let mut records = Vec::with_capacity(fed.rounds);
    let mut final_weights = setup.init.clone();
    let run_start = Instant::now();

    for round in 0..fed.rounds {
        let round_start = Instant::now();
        type LoraFactors = (Vec<Array2<f64>>, Vec<Array2<f64>>);
        let results: Vec<Result<LoraFactors>> = setup
            .shards
            .par_iter()
            .enumerate()
            .map(|(client_id, shard)| {
                let mut fin = global_in.clone();
                let mut fout = global_out.clone();
                let mut w_eff = setup.init.clone();
                let mut moments_out = MomentState::zeros(&out_shapes);
                let mut moments_in = MomentState::zeros(&in_shapes);
                let mut sampler = BatchSampler::for_client_round(
                    shard,
                    cfg.batch_size,
                    config.master_seed,
                    client_id,
                    round,
                );
                for step in 0..steps_per_round {
                    // Effective model W0 + out . in, refreshed in place.
                    for layer in 0..layer_dims.len() {
                        w_eff
                            .matrix_mut(layer)
                            .assign(setup.init.matrix(layer));
                        general_mat_mul(
                            1.0,
                            &fout[layer],
                            &fin[layer],
                            1.0,
                            w_eff.matrix_mut(layer),
                        );
                    }
                    let batch_indices = sampler.next_batch();
                    let batch = Batch::new(&batch_indices)?;
                    let g_out = setup.task.grad_right(&w_eff, &fin, &batch)?;
                    let g_in = if freeze_input_factor {
                        None
                    } else {
                        Some(setup.task.grad_left(&w_eff, &fout, &batch)?)
                    };
                    let finite = g_out.iter().all(linalg::all_finite)
                        && g_in
                            .as_ref()
                            .is_none_or(|g| g.iter().all(linalg::all_finite));
                    if !finite {
                        return Err(Error::Diverged {
                            round,
                            client: client_id,
                            interval: 0,
                            iteration: step,
                        });
                    }
                    let eta = cfg.learning_rate
                        * cfg.schedule.factor(round * steps_per_round + step);
                    let step_out = moment_step(&mut moments_out, &g_out, &cfg);
                    for (f, s) in fout.iter_mut().zip(&step_out) {
                        f.scaled_add(-eta, s);
                    }
                    if let Some(g_in) = g_in {
                        let step_in = moment_step(&mut moments_in, &g_in, &cfg);
                        for (f, s) in fin.iter_mut().zip(&step_in) {
                            f.scaled_add(-eta, s);
                        }
                    }
                }
                Ok((fout, fin))
            })
            .collect();

        let mut mean_out: Vec<Array2<f64>> = out_shapes
            .iter()
            .map(|&(r, c)| Array2::zeros((r, c)))
            .collect();
        let mut mean_in: Vec<Array2<f64>> = in_shapes
            .iter()
            .map(|&(r, c)| Array2::zeros((r, c)))
            .collect();
        let weight = 1.0 / fed.clients as f64;
        for r in results {
            let (fout, fin) = r?;
            for (dst, src) in mean_out.iter_mut().zip(&fout) {
                dst.scaled_add(weight, src);
            }
            for (dst, src) in mean_in.iter_mut().zip(&fin) {
                dst.scaled_add(weight, src);
            }
        }
        global_out = mean_out;
        if !freeze_input_factor {
            global_in = mean_in;
        }

        let mut w_eval = setup.init.clone();
        for layer in 0..layer_dims.len() {
            general_mat_mul(
                1.0,
                &global_out[layer],
                &global_in[layer],
                1.0,
                w_eval.matrix_mut(layer),
            );
        }
        let (global_loss, grad_norm_sq) = eval_global(&setup.task, &w_eval, &setup.shards)?;
        records.push(RoundRecord {
            round,
            global_loss,
            grad_norm_sq,
            uplink_params: comm,
            downlink_params: comm,
            seconds: round_start.elapsed().as_secs_f64(),
            per_client_uplink: vec![comm; fed.clients],
            seed_usage: Vec::new(),
            reconstruction_dev: None,
            reset_dev: None,
            aggregation_dev: None,
        });
        final_weights = w_eval;
    }

    let last = records.last().expect("at least one round");
    Ok(TrainingTrace {
        method,
        final_loss: last.global_loss,
        final_grad_norm_sq: last.grad_norm_sq,
        rounds: records,
        final_weights,
        total_seconds: run_start.elapsed().as_secs_f64(),
    })
}

fn fold_max(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    values.fold(None, |acc, v| match (acc, v) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (None, b) => b,
        (a, None) => a,
    })
}
