//! Synthetic differentiable tasks with exact loss, full-gradient, and
//! compressed-gradient oracles.
//!
//! Each task exposes two gradient routes. `grad` returns the full
//! mini-batch gradient, one matrix per trainable layer. `grad_b` returns
//! the compressed gradient `grad . P^T` for a given per-layer projection,
//! computed by differentiating the loss of `W + B P` in `B` at `B = 0`;
//! the factored backward pass never materializes a full `rows x cols`
//! gradient, only batch-sized and `rank`-sized intermediates.

mod data;
mod logistic;
mod mlp;
mod quadratic;

pub use data::{build_task, read_dataset, write_dataset};
pub use logistic::LogisticTask;
pub use mlp::MlpTask;
pub use quadratic::QuadraticTask;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg;
use crate::sketch::ProjectionMatrix;

/// The ordered trainable weight matrices of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    matrices: Vec<Array2<f64>>,
}

impl WeightSet {
    pub fn new(matrices: Vec<Array2<f64>>) -> Self {
        WeightSet { matrices }
    }

    pub fn zeros_like(&self) -> Self {
        WeightSet {
            matrices: self
                .matrices
                .iter()
                .map(|m| Array2::zeros(m.dim()))
                .collect(),
        }
    }

    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.matrices.iter().map(|m| m.dim()).collect()
    }

    /// Column counts per layer; the widths a projection must match.
    pub fn layer_cols(&self) -> Vec<usize> {
        self.matrices.iter().map(|m| m.ncols()).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.matrices.len()
    }

    pub fn total_params(&self) -> usize {
        self.matrices.iter().map(|m| m.len()).sum()
    }

    pub fn matrices(&self) -> &[Array2<f64>] {
        &self.matrices
    }

    pub fn matrices_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.matrices
    }

    pub fn matrix(&self, layer: usize) -> &Array2<f64> {
        &self.matrices[layer]
    }

    pub fn matrix_mut(&mut self, layer: usize) -> &mut Array2<f64> {
        &mut self.matrices[layer]
    }

    /// `self += alpha * other`, layer by layer.
    pub fn add_scaled(&mut self, other: &WeightSet, alpha: f64) {
        for (m, o) in self.matrices.iter_mut().zip(&other.matrices) {
            m.scaled_add(alpha, o);
        }
    }

    pub fn norm(&self) -> f64 {
        linalg::frobenius_norm_all(&self.matrices)
    }

    /// `||self - other||_F / ||other||_F` over all layers.
    pub fn rel_distance(&self, other: &WeightSet) -> f64 {
        linalg::rel_frobenius_distance(&self.matrices, &other.matrices)
    }

    pub fn is_finite(&self) -> bool {
        self.matrices.iter().all(linalg::all_finite)
    }
}

/// A mini-batch referenced by example indices into the task's dataset.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    indices: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(indices: &'a [usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid_argument("batch must contain at least one example"));
        }
        Ok(Batch { indices })
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        self.indices
    }
}

/// Targets of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Real targets, one row per example.
    Regression(Array2<f64>),
    /// Integer class labels in `0..classes`.
    Labels { labels: Vec<usize>, classes: usize },
}

/// A fully materialized synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub features: Array2<f64>,
    pub targets: Targets,
}

impl SyntheticDataset {
    pub fn num_examples(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels { labels, .. } => Some(labels),
            Targets::Regression(_) => None,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Labels { classes, .. } => Some(*classes),
            Targets::Regression(_) => None,
        }
    }
}

/// A differentiable objective over one or more weight matrices.
#[derive(Debug, Clone)]
pub enum TaskModel {
    Quadratic(QuadraticTask),
    Logistic(LogisticTask),
    Mlp(MlpTask),
}

impl TaskModel {
    pub fn dataset(&self) -> &SyntheticDataset {
        match self {
            TaskModel::Quadratic(t) => t.dataset(),
            TaskModel::Logistic(t) => t.dataset(),
            TaskModel::Mlp(t) => t.dataset(),
        }
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        match self {
            TaskModel::Quadratic(t) => t.layer_dims(),
            TaskModel::Logistic(t) => t.layer_dims(),
            TaskModel::Mlp(t) => t.layer_dims(),
        }
    }

    /// Fresh copy of the initial weights `W^0`.
    pub fn init_weights(&self) -> WeightSet {
        match self {
            TaskModel::Quadratic(t) => t.init_weights(),
            TaskModel::Logistic(t) => t.init_weights(),
            TaskModel::Mlp(t) => t.init_weights(),
        }
    }

    /// Mini-batch loss; with `batch` covering a full shard this is the
    /// population loss of that shard.
    pub fn loss(&self, w: &WeightSet, batch: &Batch<'_>) -> Result<f64> {
        self.check_inputs(w, batch)?;
        match self {
            TaskModel::Quadratic(t) => t.loss(w, batch),
            TaskModel::Logistic(t) => t.loss(w, batch),
            TaskModel::Mlp(t) => t.loss(w, batch),
        }
    }

    /// Analytic mini-batch gradient, one matrix per layer.
    pub fn grad(&self, w: &WeightSet, batch: &Batch<'_>) -> Result<WeightSet> {
        self.check_inputs(w, batch)?;
        match self {
            TaskModel::Quadratic(t) => t.grad(w, batch),
            TaskModel::Logistic(t) => t.grad(w, batch),
            TaskModel::Mlp(t) => t.grad(w, batch),
        }
    }

    /// Compressed gradient `grad(layer) . P(layer)^T`, one `rows x rank`
    /// block per layer, without forming any full gradient.
    pub fn grad_b(
        &self,
        w: &WeightSet,
        projections: &[ProjectionMatrix],
        batch: &Batch<'_>,
    ) -> Result<Vec<Array2<f64>>> {
        self.check_inputs(w, batch)?;
        check_projections(&self.layer_dims(), projections)?;
        let rights: Vec<&Array2<f64>> = projections.iter().map(|p| p.entries()).collect();
        self.grad_right_unchecked(w, &rights, batch)
    }

    /// Right-projected gradient `grad(layer) . R(layer)^T` for arbitrary
    /// `rank x cols` factors, the same factored path [`Self::grad_b`] uses.
    /// This is the output-factor gradient of additive low-rank adapters.
    pub fn grad_right(
        &self,
        w: &WeightSet,
        right: &[Array2<f64>],
        batch: &Batch<'_>,
    ) -> Result<Vec<Array2<f64>>> {
        self.check_inputs(w, batch)?;
        check_right_factors(&self.layer_dims(), right)?;
        let rights: Vec<&Array2<f64>> = right.iter().collect();
        self.grad_right_unchecked(w, &rights, batch)
    }

    fn grad_right_unchecked(
        &self,
        w: &WeightSet,
        rights: &[&Array2<f64>],
        batch: &Batch<'_>,
    ) -> Result<Vec<Array2<f64>>> {
        match self {
            TaskModel::Quadratic(t) => t.grad_right(w, rights, batch),
            TaskModel::Logistic(t) => t.grad_right(w, rights, batch),
            TaskModel::Mlp(t) => t.grad_right(w, rights, batch),
        }
    }

    /// Left-projected gradient `left(layer)^T . grad(layer)`, one
    /// `rank x cols` block per layer, without forming any full gradient.
    /// This is the factor gradient of additive low-rank adapters.
    pub fn grad_left(
        &self,
        w: &WeightSet,
        left: &[Array2<f64>],
        batch: &Batch<'_>,
    ) -> Result<Vec<Array2<f64>>> {
        self.check_inputs(w, batch)?;
        check_left_factors(&self.layer_dims(), left)?;
        match self {
            TaskModel::Quadratic(t) => t.grad_left(w, left, batch),
            TaskModel::Logistic(t) => t.grad_left(w, left, batch),
            TaskModel::Mlp(t) => t.grad_left(w, left, batch),
        }
    }

    /// Smoothness constant of the worst shard where a closed form exists.
    pub fn smoothness_bound(&self, shards: &[Vec<usize>]) -> Result<Option<f64>> {
        match self {
            TaskModel::Quadratic(t) => t.smoothness_bound(shards).map(Some),
            TaskModel::Logistic(t) => t.smoothness_bound(shards).map(Some),
            TaskModel::Mlp(_) => Ok(None),
        }
    }

    /// Global objective: mean of per-shard population losses.
    pub fn global_loss(&self, w: &WeightSet, shards: &[Vec<usize>]) -> Result<f64> {
        if shards.is_empty() {
            return Err(Error::invalid_argument("global_loss: no shards"));
        }
        let mut total = 0.0;
        for shard in shards {
            total += self.loss(w, &Batch::new(shard)?)?;
        }
        Ok(total / shards.len() as f64)
    }

    /// Global gradient: mean of per-shard population gradients.
    pub fn global_grad(&self, w: &WeightSet, shards: &[Vec<usize>]) -> Result<WeightSet> {
        if shards.is_empty() {
            return Err(Error::invalid_argument("global_grad: no shards"));
        }
        let mut acc = w.zeros_like();
        for shard in shards {
            let g = self.grad(w, &Batch::new(shard)?)?;
            acc.add_scaled(&g, 1.0 / shards.len() as f64);
        }
        Ok(acc)
    }

    fn check_inputs(&self, w: &WeightSet, batch: &Batch<'_>) -> Result<()> {
        let dims = self.layer_dims();
        if w.dims() != dims {
            return Err(Error::invalid_argument(format!(
                "weight shape mismatch: expected {:?}, got {:?}",
                dims,
                w.dims()
            )));
        }
        let n = self.dataset().num_examples();
        if let Some(&bad) = batch.indices().iter().find(|&&ix| ix >= n) {
            return Err(Error::invalid_argument(format!(
                "batch index {bad} out of range for {n} examples"
            )));
        }
        Ok(())
    }
}

fn check_projections(dims: &[(usize, usize)], projections: &[ProjectionMatrix]) -> Result<usize> {
    if projections.len() != dims.len() {
        return Err(Error::invalid_argument(format!(
            "expected {} projections, got {}",
            dims.len(),
            projections.len()
        )));
    }
    let rank = projections[0].rank();
    for (p, &(_, cols)) in projections.iter().zip(dims) {
        if p.rank() != rank {
            return Err(Error::invalid_argument(format!(
                "projection rank mismatch across layers: {} vs {}",
                p.rank(),
                rank
            )));
        }
        if p.cols() != cols {
            return Err(Error::invalid_argument(format!(
                "projection width {} does not match layer width {}",
                p.cols(),
                cols
            )));
        }
    }
    Ok(rank)
}

fn check_right_factors(dims: &[(usize, usize)], right: &[Array2<f64>]) -> Result<usize> {
    if right.len() != dims.len() {
        return Err(Error::invalid_argument(format!(
            "expected {} right factors, got {}",
            dims.len(),
            right.len()
        )));
    }
    let rank = right[0].nrows();
    for (r, &(_, cols)) in right.iter().zip(dims) {
        if r.nrows() != rank {
            return Err(Error::invalid_argument(
                "right-factor rank mismatch across layers",
            ));
        }
        if r.ncols() != cols {
            return Err(Error::invalid_argument(format!(
                "right factor width {} does not match layer width {}",
                r.ncols(),
                cols
            )));
        }
    }
    Ok(rank)
}

fn check_left_factors(dims: &[(usize, usize)], left: &[Array2<f64>]) -> Result<usize> {
    if left.len() != dims.len() {
        return Err(Error::invalid_argument(format!(
            "expected {} left factors, got {}",
            dims.len(),
            left.len()
        )));
    }
    let rank = left[0].ncols();
    for (b, &(rows, _)) in left.iter().zip(dims) {
        if b.ncols() != rank {
            return Err(Error::invalid_argument(
                "left-factor rank mismatch across layers",
            ));
        }
        if b.nrows() != rows {
            return Err(Error::invalid_argument(format!(
                "left factor height {} does not match layer height {}",
                b.nrows(),
                rows
            )));
        }
    }
    Ok(rank)
}

/// Empirical noise and heterogeneity estimates at `w`.
///
/// The noise term is the worst-shard variance of a mini-batch gradient of
/// `batch_size` examples drawn without replacement (zero when the batch
/// covers the shard). The heterogeneity term is
/// `mean_n ||grad_n||^2 - ||mean_n grad_n||^2`.
pub fn estimate_noise_and_heterogeneity(
    task: &TaskModel,
    w: &WeightSet,
    shards: &[Vec<usize>],
    batch_size: usize,
) -> Result<(f64, f64)> {
    if shards.is_empty() {
        return Err(Error::invalid_argument("no shards given"));
    }
    if batch_size == 0 {
        return Err(Error::invalid_argument("batch_size must be at least 1"));
    }
    let mut noise_max = 0.0f64;
    let mut mean_grad = w.zeros_like();
    let mut mean_sq_norm = 0.0;
    for shard in shards {
        if shard.is_empty() {
            return Err(Error::invalid_argument("empty shard"));
        }
        let m = shard.len();
        let shard_grad = task.grad(w, &Batch::new(shard)?)?;
        mean_sq_norm += shard_grad.norm().powi(2) / shards.len() as f64;
        mean_grad.add_scaled(&shard_grad, 1.0 / shards.len() as f64);

        // Per-example gradient variance around the shard mean.
        let mut example_var = 0.0;
        for &ix in shard {
            let g = task.grad(w, &Batch::new(std::slice::from_ref(&ix))?)?;
            let mut diff = g;
            diff.add_scaled(&shard_grad, -1.0);
            example_var += diff.norm().powi(2);
        }
        example_var /= m as f64;

        // Variance of the mean of `b` draws without replacement.
        let b = batch_size.min(m);
        let step_noise = if m <= 1 || b >= m {
            0.0
        } else {
            (example_var / b as f64) * ((m - b) as f64 / (m - 1) as f64)
        };
        noise_max = noise_max.max(step_noise);
    }
    let heterogeneity = (mean_sq_norm - mean_grad.norm().powi(2)).max(0.0);
    Ok((noise_max, heterogeneity))
}
