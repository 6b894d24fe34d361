//! Multiclass logistic regression: a convex classification loss with
//! labeled data for heterogeneity experiments.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg;
use crate::memtrace;

use super::{Batch, SyntheticDataset, Targets, WeightSet};

/// Softmax cross-entropy over logits `X W`, `W` of shape
/// `feature_dim x classes`.
#[derive(Debug, Clone)]
pub struct LogisticTask {
    data: SyntheticDataset,
    init: WeightSet,
}

impl LogisticTask {
    pub fn new(data: SyntheticDataset, init: WeightSet) -> Result<Self> {
        let Targets::Labels { classes, .. } = data.targets else {
            return Err(Error::invalid_argument(
                "logistic task requires labeled targets",
            ));
        };
        if classes < 2 {
            return Err(Error::invalid_argument("at least two classes required"));
        }
        if init.num_layers() != 1 {
            return Err(Error::invalid_argument(
                "logistic task has exactly one weight matrix",
            ));
        }
        let (rows, cols) = init.matrix(0).dim();
        if rows != data.features.ncols() || cols != classes {
            return Err(Error::invalid_argument(
                "logistic init weights do not match dataset dims",
            ));
        }
        Ok(LogisticTask { data, init })
    }

    pub fn dataset(&self) -> &SyntheticDataset {
        &self.data
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        vec![self.init.matrix(0).dim()]
    }

    pub fn init_weights(&self) -> WeightSet {
        self.init.clone()
    }

    fn labels(&self) -> &[usize] {
        match &self.data.targets {
            Targets::Labels { labels, .. } => labels,
            Targets::Regression(_) => unreachable!("checked in constructor"),
        }
    }

    /// Batch logits with the row-wise max subtracted for stability.
    fn shifted_logits(&self, w: &WeightSet, batch: &Batch<'_>) -> Array2<f64> {
        let xb = linalg::gather_rows(&self.data.features.view(), batch.indices());
        let mut z = xb.dot(w.matrix(0));
        memtrace::record(z.len());
        for mut row in z.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| v - max);
        }
        z
    }

    pub(super) fn loss(&self, w: &WeightSet, batch: &Batch<'_>) -> Result<f64> {
        let z = self.shifted_logits(w, batch);
        let labels = self.labels();
        let mut total = 0.0;
        for (row, &ix) in z.rows().into_iter().zip(batch.indices()) {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - row[labels[ix]];
        }
        Ok(total / batch.size() as f64)
    }

    /// Softmax probabilities minus the one-hot targets, the shared backward
    /// factor of every gradient route.
    fn prob_residual(&self, w: &WeightSet, batch: &Batch<'_>) -> Array2<f64> {
        let mut z = self.shifted_logits(w, batch);
        let labels = self.labels();
        for (mut row, &ix) in z.rows_mut().into_iter().zip(batch.indices()) {
            let denom = row.iter().map(|v| v.exp()).sum::<f64>();
            row.mapv_inplace(|v| v.exp() / denom);
            row[labels[ix]] -= 1.0;
        }
        z
    }

    pub(super) fn grad(&self, w: &WeightSet, batch: &Batch<'_>) -> Result<WeightSet> {
        let d = self.prob_residual(w, batch);
        let xb = linalg::gather_rows(&self.data.features.view(), batch.indices());
        let g = xb.t().dot(&d) / batch.size() as f64;
        Ok(WeightSet::new(vec![g]))
    }

    pub(super) fn grad_right(
        &self,
        w: &WeightSet,
        rights: &[&Array2<f64>],
        batch: &Batch<'_>,
    ) -> Result<Vec<Array2<f64>>> {
        let d = self.prob_residual(w, batch);
        let xb = linalg::gather_rows(&self.data.features.view(), batch.indices());
        let sketched = d.dot(&rights[0].t());
        memtrace::record(sketched.len());
        let g = xb.t().dot(&sketched) / batch.size() as f64;
        memtrace::record(g.len());
        Ok(vec![g])
    }

    pub(super) fn grad_left(
        &self,
        w: &WeightSet,
        left: &[Array2<f64>],
        batch: &Batch<'_>,
    ) -> Result<Vec<Array2<f64>>> {
        let d = self.prob_residual(w, batch);
        let xb = linalg::gather_rows(&self.data.features.view(), batch.indices());
        let xl = xb.dot(&left[0]);
        memtrace::record(xl.len());
        let g = xl.t().dot(&d) / batch.size() as f64;
        memtrace::record(g.len());
        Ok(vec![g])
    }

    /// Smoothness upper bound of the worst shard; the softmax Hessian is
    /// bounded by `I/2`, so `L_n <= lambda_max(X_n^T X_n) / (2 m_n)`.
    pub fn smoothness_bound(&self, shards: &[Vec<usize>]) -> Result<f64> {
        if shards.is_empty() {
            return Err(Error::invalid_argument("no shards given"));
        }
        let mut worst = 0.0f64;
        for shard in shards {
            if shard.is_empty() {
                return Err(Error::invalid_argument("empty shard"));
            }
            let xn = linalg::gather_rows(&self.data.features.view(), shard);
            let h = xn.t().dot(&xn) / (2.0 * shard.len() as f64);
            worst = worst.max(linalg::spd_max_eigenvalue(&h)?);
        }
        Ok(worst)
    }
}
