//! Small dense linear-algebra helpers used across the crate.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::memtrace;

/// Allocate a zero matrix and report it to the allocation trace.
pub fn tracked_zeros(rows: usize, cols: usize) -> Array2<f64> {
    memtrace::record(rows * cols);
    Array2::zeros((rows, cols))
}

/// Gather a row subset of `source` into a fresh matrix.
pub fn gather_rows(source: &ArrayView2<'_, f64>, indices: &[usize]) -> Array2<f64> {
    let mut out = tracked_zeros(indices.len(), source.ncols());
    for (row, &ix) in indices.iter().enumerate() {
        out.row_mut(row).assign(&source.row(ix));
    }
    out
}

pub fn frobenius_norm(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Frobenius norm over a list of matrices treated as one block vector.
pub fn frobenius_norm_all(ms: &[Array2<f64>]) -> f64 {
    ms.iter()
        .map(|m| m.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// `||a - b||_F / max(||b||_F, floor)`; the floor guards comparisons against
/// an exactly-zero reference.
pub fn rel_frobenius_distance(a: &[Array2<f64>], b: &[Array2<f64>]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    for (x, y) in a.iter().zip(b) {
        debug_assert_eq!(x.dim(), y.dim());
        diff += x
            .iter()
            .zip(y.iter())
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>();
    }
    let denom = frobenius_norm_all(b).max(1e-300);
    diff.sqrt() / denom
}

pub fn max_abs_entry(m: &Array2<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub fn all_finite(m: &Array2<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Solve `H x = b` for symmetric positive-definite `H` via Cholesky.
pub fn cholesky_solve(h: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = h.nrows();
    if h.ncols() != n || b.len() != n {
        return Err(Error::invalid_argument("cholesky_solve: shape mismatch"));
    }
    // Lower-triangular factor, column-oriented.
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = h[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::invalid_argument(
                "cholesky_solve: matrix is not positive definite",
            ));
        }
        let diag = diag.sqrt();
        l[(j, j)] = diag;
        for i in (j + 1)..n {
            let mut v = h[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / diag;
        }
    }
    // Forward then backward substitution.
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[(i, k)] * y[k];
        }
        y[i] = v / l[(i, i)];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in (i + 1)..n {
            v -= l[(k, i)] * x[k];
        }
        x[i] = v / l[(i, i)];
    }
    Ok(x)
}

/// Largest eigenvalue of a symmetric positive-semidefinite matrix by power
/// iteration. Deterministic: fixed start vector, fixed iteration cap.
pub fn spd_max_eigenvalue(h: &Array2<f64>) -> Result<f64> {
    let n = h.nrows();
    if h.ncols() != n || n == 0 {
        return Err(Error::invalid_argument(
            "spd_max_eigenvalue: square non-empty matrix required",
        ));
    }
    let mut v = Array1::<f64>::from_shape_fn(n, |i| 1.0 + (i as f64) / (n as f64));
    let mut lambda = 0.0f64;
    for _ in 0..500 {
        let w = h.dot(&v);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = &w / norm;
        let new_lambda = next.dot(&h.dot(&next));
        let done = (new_lambda - lambda).abs() <= 1e-13 * new_lambda.abs().max(1.0);
        lambda = new_lambda;
        v = next;
        if done {
            break;
        }
    }
    Ok(lambda)
}
