//! Least-squares task with closed-form minimizer and exact smoothness
//! constant; the workhorse for step-size rules and convergence checks.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::{self, tracked_zeros};
use crate::memtrace;

use super::{Batch, SyntheticDataset, Targets, WeightSet};

/// `F(W) = (1/2m) ||X W - Y||_F^2` over a row-partitioned dataset.
#[derive(Debug, Clone)]
pub struct QuadraticTask {
    data: SyntheticDataset,
    init: WeightSet,
}

impl QuadraticTask {
    pub fn new(data: SyntheticDataset, init: WeightSet) -> Result<Self> {
        let Targets::Regression(ref y) = data.targets else {
            return Err(Error::invalid_argument(
                "quadratic task requires regression targets",
            ));
        };
        if init.num_layers() != 1 {
            return Err(Error::invalid_argument(
                "quadratic task has exactly one weight matrix",
            ));
        }
        let (rows, cols) = init.matrix(0).dim();
        if rows != data.features.ncols() || cols != y.ncols() {
            return Err(Error::invalid_argument(
                "quadratic init weights do not match dataset dims",
            ));
        }
        Ok(QuadraticTask { data, init })
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

    fn targets(&self) -> &Array2<f64> {
        match &self.data.targets {
            Targets::Regression(y) => y,
            Targets::Labels { .. } => unreachable!("checked in constructor"),
        }
    }

    /// Residual `X_b W - Y_b` on the batch.
    fn residual(&self, w: &WeightSet, batch: &Batch<'_>) -> Array2<f64> {
        let xb = linalg::gather_rows(&self.data.features.view(), batch.indices());
        let yb = linalg::gather_rows(&self.targets().view(), batch.indices());
        memtrace::record(batch.size() * yb.ncols());
        let mut r = xb.dot(w.matrix(0));
        r -= &yb;
        r
    }

    pub(super) fn loss(&self, w: &WeightSet, batch: &Batch<'_>) -> Result<f64> {
        let r = self.residual(w, batch);
        Ok(r.iter().map(|v| v * v).sum::<f64>() / (2.0 * batch.size() as f64))
    }

    pub(super) fn grad(&self, w: &WeightSet, batch: &Batch<'_>) -> Result<WeightSet> {
        let r = self.residual(w, batch);
        let xb = linalg::gather_rows(&self.data.features.view(), batch.indices());
        let g = xb.t().dot(&r) / batch.size() as f64;
        Ok(WeightSet::new(vec![g]))
    }

    pub(super) fn grad_right(
        &self,
        w: &WeightSet,
        rights: &[&Array2<f64>],
        batch: &Batch<'_>,
    ) -> Result<Vec<Array2<f64>>> {
        let r = self.residual(w, batch);
        let xb = linalg::gather_rows(&self.data.features.view(), batch.indices());
        // (X^T (R P^T)) / m: both intermediates are batch- or rank-sized.
        let sketched = r.dot(&rights[0].t());
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
        let r = self.residual(w, batch);
        let xb = linalg::gather_rows(&self.data.features.view(), batch.indices());
        let xl = xb.dot(&left[0]);
        memtrace::record(xl.len());
        let g = xl.t().dot(&r) / batch.size() as f64;
        memtrace::record(g.len());
        Ok(vec![g])
    }

    /// Exact smoothness constant of the worst shard:
    /// `max_n lambda_max(X_n^T X_n) / m_n`.
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
            let h = xn.t().dot(&xn) / shard.len() as f64;
            worst = worst.max(linalg::spd_max_eigenvalue(&h)?);
        }
        Ok(worst)
    }

    /// Minimizer of the global objective `(1/N) sum_n F_n`, solved from the
    /// weighted normal equations column by column.
    pub fn closed_form_minimizer(&self, shards: &[Vec<usize>]) -> Result<WeightSet> {
        if shards.is_empty() {
            return Err(Error::invalid_argument("no shards given"));
        }
        let d = self.data.features.ncols();
        let d_out = self.targets().ncols();
        let n = shards.len() as f64;
        let mut h = tracked_zeros(d, d);
        let mut c = tracked_zeros(d, d_out);
        for shard in shards {
            if shard.is_empty() {
                return Err(Error::invalid_argument("empty shard"));
            }
            let xn = linalg::gather_rows(&self.data.features.view(), shard);
            let yn = linalg::gather_rows(&self.targets().view(), shard);
            let scale = 1.0 / (n * shard.len() as f64);
            h.scaled_add(scale, &xn.t().dot(&xn));
            c.scaled_add(scale, &xn.t().dot(&yn));
        }
        let mut w_star = tracked_zeros(d, d_out);
        for j in 0..d_out {
            let rhs = Array1::from_iter(c.column(j).iter().copied());
            let col = linalg::cholesky_solve(&h, &rhs)?;
            w_star.column_mut(j).assign(&col);
        }
        Ok(WeightSet::new(vec![w_star]))
    }
}
