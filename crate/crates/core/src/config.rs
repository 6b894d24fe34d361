//! Run configuration: every module precondition is validated here before a
//! run starts, and the full configuration round-trips through the run
//! manifest so any artifact is reproducible from the manifest alone.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::accounting::Method;
use crate::error::{Error, Result};
use crate::sketch::SketchKind;

/// Task family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskVariant {
    Quadratic,
    Logistic,
    TwoLayerMlp,
}

/// Synthetic task and data-generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub variant: TaskVariant,
    /// Total dataset size before partitioning.
    pub examples: usize,
    pub feature_dim: usize,
    /// Regression outputs, or class count for the logistic variant.
    pub output_dim: usize,
    /// Hidden width (two-layer-mlp only).
    pub hidden_dim: usize,
    /// Target noise scale (regression); ignored by the logistic variant,
    /// whose labels are sampled from the planted class probabilities.
    pub noise: f64,
    /// Scale of the Gaussian initial weights; 0 gives exact zero init.
    pub init_scale: f64,
    /// Rank of the planted optimal update; `None` plants a full-rank one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted_rank: Option<usize>,
    /// Magnitude of the planted update.
    pub planted_scale: f64,
    /// Spectrum spread of the feature covariance (>= 1).
    pub condition: f64,
    /// Load the dataset from a file instead of generating it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_file: Option<PathBuf>,
    /// After generation, export the dataset for replay.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub export_dataset: Option<PathBuf>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            variant: TaskVariant::Quadratic,
            examples: 256,
            feature_dim: 8,
            output_dim: 4,
            hidden_dim: 16,
            noise: 0.01,
            init_scale: 0.1,
            planted_rank: None,
            planted_scale: 1.0,
            condition: 1.0,
            dataset_file: None,
            export_dataset: None,
        }
    }
}

impl TaskConfig {
    /// Trainable layer shapes implied by the variant.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        match self.variant {
            TaskVariant::Quadratic | TaskVariant::Logistic => {
                vec![(self.feature_dim, self.output_dim)]
            }
            TaskVariant::TwoLayerMlp => vec![
                (self.feature_dim, self.hidden_dim),
                (self.hidden_dim, self.output_dim),
            ],
        }
    }

    pub fn has_labels(&self) -> bool {
        matches!(self.variant, TaskVariant::Logistic)
    }
}

/// Dataset partitioning mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    /// Dirichlet concentration; smaller means more skewed shards.
    pub alpha: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            mode: PartitionMode::Iid,
            alpha: 0.5,
        }
    }
}

/// Round structure and method selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub method: Method,
    pub clients: usize,
    pub rounds: usize,
    /// Pool size K broadcast each round.
    pub seed_count: usize,
    /// Intervals per round (the sketch seed and moments change at interval
    /// boundaries).
    pub intervals: usize,
    /// Iterations per interval.
    pub interval_len: usize,
    /// Subspace dimension of the gradient sketch.
    pub sketch_rank: usize,
    pub sketch_kind: SketchKind,
    /// Adapter rank for the low-rank baselines.
    pub lora_rank: usize,
    /// Distribution of the frozen/initial adapter input factor.
    pub lora_init: SketchKind,
    /// Local iterations per round; `intervals * interval_len` must equal
    /// this unless explicitly overridden.
    pub local_iteration_budget: usize,
    pub allow_budget_override: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            method: Method::FedKrso,
            clients: 4,
            rounds: 10,
            seed_count: 10,
            intervals: 5,
            interval_len: 20,
            sketch_rank: 4,
            sketch_kind: SketchKind::Gaussian,
            lora_rank: 4,
            lora_init: SketchKind::Gaussian,
            local_iteration_budget: 100,
            allow_budget_override: false,
        }
    }
}

/// Learning-rate schedule applied across all local iterations of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

/// Local optimizer settings shared by every method.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalOptConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// When false the preconditioner is bypassed and raw gradients are used.
    pub momentum: bool,
    /// Time-indexed bias correction instead of the fixed divisors.
    pub standard_bias_correction: bool,
    pub batch_size: usize,
    pub schedule: ScheduleKind,
}

impl Default for LocalOptConfig {
    fn default() -> Self {
        LocalOptConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum: true,
            standard_bias_correction: false,
            batch_size: 16,
            schedule: ScheduleKind::Constant,
        }
    }
}

/// Optional run-time verification; `debug_pre_reset` keeps per-client
/// pre-reset model copies to cross-check aggregation, at full-model memory
/// cost per client.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub check_round_sync: bool,
    pub debug_pre_reset: bool,
}

/// Complete, self-contained run description.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub task: TaskConfig,
    pub partition: PartitionConfig,
    pub federation: FederationConfig,
    pub local: LocalOptConfig,
    pub verify: VerifyConfig,
}

impl RunConfig {
    /// Check every module precondition. Error messages name the offending
    /// field with its dotted path.
    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        if t.examples == 0 {
            return Err(Error::invalid_config("task.examples must be at least 1"));
        }
        if t.feature_dim == 0 {
            return Err(Error::invalid_config("task.feature_dim must be at least 1"));
        }
        if t.output_dim == 0 {
            return Err(Error::invalid_config("task.output_dim must be at least 1"));
        }
        if t.variant == TaskVariant::Logistic && t.output_dim < 2 {
            return Err(Error::invalid_config(
                "task.output_dim must be at least 2 for the logistic variant",
            ));
        }
        if t.variant == TaskVariant::TwoLayerMlp && t.hidden_dim == 0 {
            return Err(Error::invalid_config("task.hidden_dim must be at least 1"));
        }
        if !t.noise.is_finite() || t.noise < 0.0 {
            return Err(Error::invalid_config("task.noise must be non-negative"));
        }
        if !t.init_scale.is_finite() || t.init_scale < 0.0 {
            return Err(Error::invalid_config("task.init_scale must be non-negative"));
        }
        if !t.condition.is_finite() || t.condition < 1.0 {
            return Err(Error::invalid_config("task.condition must be at least 1"));
        }
        if let Some(rank) = t.planted_rank {
            let max = t
                .layer_dims()
                .iter()
                .map(|&(r, c)| r.min(c))
                .min()
                .unwrap_or(0);
            if rank == 0 || rank > max {
                return Err(Error::invalid_config(format!(
                    "task.planted_rank must be in 1..={max}"
                )));
            }
        }

        let p = &self.partition;
        if self.federation.clients == 0 {
            return Err(Error::invalid_config(
                "federation.clients must be at least 1",
            ));
        }
        if t.examples < self.federation.clients {
            return Err(Error::invalid_config(
                "task.examples must be at least federation.clients",
            ));
        }
        if p.mode == PartitionMode::Dirichlet {
            if !p.alpha.is_finite() || p.alpha <= 0.0 {
                return Err(Error::invalid_config(
                    "partition.alpha must be positive in dirichlet mode",
                ));
            }
            if !t.has_labels() {
                return Err(Error::invalid_config(
                    "partition.mode dirichlet requires a labeled task (logistic variant)",
                ));
            }
        }

        let f = &self.federation;
        if f.rounds == 0 {
            return Err(Error::invalid_config("federation.rounds must be at least 1"));
        }
        if f.seed_count == 0 {
            return Err(Error::invalid_config(
                "federation.seed_count must be at least 1",
            ));
        }
        if f.intervals == 0 {
            return Err(Error::invalid_config(
                "federation.intervals must be at least 1",
            ));
        }
        if f.interval_len == 0 {
            return Err(Error::invalid_config(
                "federation.interval_len must be at least 1",
            ));
        }
        if f.sketch_rank == 0 {
            return Err(Error::invalid_config(
                "federation.sketch_rank must be at least 1",
            ));
        }
        let min_cols = t.layer_dims().iter().map(|&(_, c)| c).min().unwrap_or(0);
        if f.sketch_kind == SketchKind::RowOrthonormalScaled && f.sketch_rank > min_cols {
            return Err(Error::invalid_config(format!(
                "federation.sketch_rank must not exceed the narrowest layer width {min_cols} \
                 with the row-orthonormal-scaled kind"
            )));
        }
        if matches!(f.method, Method::FedIt | Method::FfaLora) {
            if f.lora_rank == 0 {
                return Err(Error::invalid_config(
                    "federation.lora_rank must be at least 1",
                ));
            }
            if f.lora_init == SketchKind::RowOrthonormalScaled && f.lora_rank > min_cols {
                return Err(Error::invalid_config(format!(
                    "federation.lora_rank must not exceed the narrowest layer width {min_cols} \
                     with the row-orthonormal-scaled init"
                )));
            }
        }
        if !f.allow_budget_override && f.intervals * f.interval_len != f.local_iteration_budget {
            return Err(Error::invalid_config(format!(
                "federation.intervals * federation.interval_len = {} does not match \
                 federation.local_iteration_budget = {}; set \
                 federation.allow_budget_override = true to run anyway",
                f.intervals * f.interval_len,
                f.local_iteration_budget
            )));
        }

        let l = &self.local;
        if !l.learning_rate.is_finite() || l.learning_rate < 0.0 {
            return Err(Error::invalid_config(
                "local.learning_rate must be non-negative",
            ));
        }
        for (name, beta) in [("local.beta1", l.beta1), ("local.beta2", l.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::invalid_config(format!("{name} must be in [0, 1)")));
            }
        }
        if !l.epsilon.is_finite() || l.epsilon <= 0.0 {
            return Err(Error::invalid_config("local.epsilon must be positive"));
        }
        if l.batch_size == 0 {
            return Err(Error::invalid_config("local.batch_size must be at least 1"));
        }
        Ok(())
    }

    /// Trainable layer shapes implied by the task section.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.task.layer_dims()
    }

    /// Total local iterations in the run, the span of the cosine schedule.
    pub fn total_local_steps(&self) -> usize {
        self.federation.rounds * self.federation.intervals * self.federation.interval_len
    }
}
