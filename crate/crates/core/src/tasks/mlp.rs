//! Two-layer tanh network: the non-convex regression case. Biases are not
//! modeled; the trainable parameters are the two weight matrices.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg;
use crate::memtrace;

use super::{Batch, SyntheticDataset, Targets, WeightSet};

/// `F(W1, W2) = (1/2m) ||tanh(X W1) W2 - Y||_F^2`.
#[derive(Debug, Clone)]
pub struct MlpTask {
    data: SyntheticDataset,
    init: WeightSet,
}

struct Forward {
    hidden: Array2<f64>,
    residual: Array2<f64>,
}

impl MlpTask {
    pub fn new(data: SyntheticDataset, init: WeightSet) -> Result<Self> {
        let Targets::Regression(ref y) = data.targets else {
            return Err(Error::invalid_argument(
                "mlp task requires regression targets",
            ));
        };
        if init.num_layers() != 2 {
            return Err(Error::invalid_argument(
                "mlp task has exactly two weight matrices",
            ));
        }
        let (in_dim, hidden) = init.matrix(0).dim();
        let (hidden2, out_dim) = init.matrix(1).dim();
        if in_dim != data.features.ncols() || hidden != hidden2 || out_dim != y.ncols() {
            return Err(Error::invalid_argument(
                "mlp init weights do not match dataset dims",
            ));
        }
        Ok(MlpTask { data, init })
    }

    pub fn dataset(&self) -> &SyntheticDataset {
        &self.data
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        vec![self.init.matrix(0).dim(), self.init.matrix(1).dim()]
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

    fn forward(&self, w: &WeightSet, batch: &Batch<'_>) -> Forward {
        let xb = linalg::gather_rows(&self.data.features.view(), batch.indices());
        let mut hidden = xb.dot(w.matrix(0));
        memtrace::record(hidden.len());
        hidden.mapv_inplace(f64::tanh);
        let yb = linalg::gather_rows(&self.targets().view(), batch.indices());
        let mut residual = hidden.dot(w.matrix(1));
        memtrace::record(residual.len());
        residual -= &yb;
        Forward { hidden, residual }
    }

    /// Backward error at the hidden layer:
    /// `(R W2^T) . (1 - H^2)` elementwise.
    fn hidden_error(&self, w: &WeightSet, fwd: &Forward) -> Array2<f64> {
        let mut e = fwd.residual.dot(&w.matrix(1).t());
        memtrace::record(e.len());
        e.zip_mut_with(&fwd.hidden, |ev, &h| *ev *= 1.0 - h * h);
        e
    }

    pub(super) fn loss(&self, w: &WeightSet, batch: &Batch<'_>) -> Result<f64> {
        let fwd = self.forward(w, batch);
        Ok(fwd.residual.iter().map(|v| v * v).sum::<f64>() / (2.0 * batch.size() as f64))
    }

    pub(super) fn grad(&self, w: &WeightSet, batch: &Batch<'_>) -> Result<WeightSet> {
        let fwd = self.forward(w, batch);
        let m = batch.size() as f64;
        let g2 = fwd.hidden.t().dot(&fwd.residual) / m;
        let e1 = self.hidden_error(w, &fwd);
        let xb = linalg::gather_rows(&self.data.features.view(), batch.indices());
        let g1 = xb.t().dot(&e1) / m;
        Ok(WeightSet::new(vec![g1, g2]))
    }

    pub(super) fn grad_right(
        &self,
        w: &WeightSet,
        rights: &[&Array2<f64>],
        batch: &Batch<'_>,
    ) -> Result<Vec<Array2<f64>>> {
        let fwd = self.forward(w, batch);
        let m = batch.size() as f64;
        // Each layer's block is (activation^T (error P^T)) / m; the error
        // matrices are batch-sized, never weight-sized.
        let e1 = self.hidden_error(w, &fwd);
        let xb = linalg::gather_rows(&self.data.features.view(), batch.indices());
        let sk1 = e1.dot(&rights[0].t());
        memtrace::record(sk1.len());
        let g1 = xb.t().dot(&sk1) / m;
        memtrace::record(g1.len());
        let sk2 = fwd.residual.dot(&rights[1].t());
        memtrace::record(sk2.len());
        let g2 = fwd.hidden.t().dot(&sk2) / m;
        memtrace::record(g2.len());
        Ok(vec![g1, g2])
    }

    pub(super) fn grad_left(
        &self,
        w: &WeightSet,
        left: &[Array2<f64>],
        batch: &Batch<'_>,
    ) -> Result<Vec<Array2<f64>>> {
        let fwd = self.forward(w, batch);
        let m = batch.size() as f64;
        let e1 = self.hidden_error(w, &fwd);
        let xb = linalg::gather_rows(&self.data.features.view(), batch.indices());
        let xl = xb.dot(&left[0]);
        memtrace::record(xl.len());
        let g1 = xl.t().dot(&e1) / m;
        memtrace::record(g1.len());
        let hl = fwd.hidden.dot(&left[1]);
        memtrace::record(hl.len());
        let g2 = hl.t().dot(&fwd.residual) / m;
        memtrace::record(g2.len());
        Ok(vec![g1, g2])
    }
}
