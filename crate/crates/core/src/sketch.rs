//! Seeded generation of projection matrices and the per-round seed pool.
//!
//! A projection matrix is never transmitted: server and clients exchange
//! 64-bit seeds and regenerate the matrix locally. Generation is a pure
//! function of `(seed, rank, cols, kind, layer_index)`, so any party obtains
//! bitwise-identical entries.
//!
//! Two kinds are provided. `Gaussian` draws entries i.i.d. from a centered
//! normal with variance `1/rank`, which makes the compression unbiased:
//! `E[P^T P] = I`. `RowOrthonormalScaled` orthonormalizes `rank` Gaussian
//! rows and scales them by `sqrt(cols/rank)`, which additionally satisfies
//! `P P^T = (cols/rank) I` exactly and pins the operator norm of `P` to
//! `sqrt(cols/rank)`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// A 64-bit seed identifying one random subspace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seed(pub u64);

/// The ordered seed set broadcast for one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedPool {
    round: usize,
    seeds: Vec<Seed>,
}

impl SeedPool {
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn seeds(&self) -> &[Seed] {
        &self.seeds
    }

    pub fn seed(&self, k: usize) -> Seed {
        self.seeds[k]
    }
}

/// Distribution family of the projection entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SketchKind {
    /// Entries i.i.d. normal with variance `1/rank`.
    Gaussian,
    /// Orthonormalized Gaussian rows scaled by `sqrt(cols/rank)`.
    RowOrthonormalScaled,
}

/// A dense `rank x cols` projection regenerated from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    entries: Array2<f64>,
    kind: SketchKind,
    seed: Seed,
}

impl ProjectionMatrix {
    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn kind(&self) -> SketchKind {
        self.kind
    }

    pub fn seed(&self) -> Seed {
        self.seed
    }

    /// Number of rows (the subspace dimension).
    pub fn rank(&self) -> usize {
        self.entries.nrows()
    }

    /// Number of columns (the layer width it compresses).
    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }
}

/// Generate the seed pool for one round. The pool is fully determined by
/// `(master_seed, round)`, so server and clients can regenerate it
/// independently; the round index is hashed into the stream, making seed
/// collisions across rounds as unlikely as 64-bit collisions.
pub fn make_seed_pool(master_seed: Seed, round: usize, pool_size: usize) -> Result<SeedPool> {
    if pool_size == 0 {
        return Err(Error::invalid_config("seed pool size must be at least 1"));
    }
    let mut rng = rng::stream_rng(master_seed.0, Stream::Pool, &[round as u64]);
    let seeds = (0..pool_size).map(|_| Seed(rng.gen::<u64>())).collect();
    Ok(SeedPool { round, seeds })
}

/// Regenerate the projection for one layer from a seed.
///
/// Distinct `layer_index` values are mixed into the stream so a multi-matrix
/// model gets statistically independent projections from the same seed.
pub fn gen_projection(
    seed: Seed,
    rank: usize,
    cols: usize,
    kind: SketchKind,
    layer_index: usize,
) -> Result<ProjectionMatrix> {
    if rank == 0 {
        return Err(Error::invalid_config("projection rank must be at least 1"));
    }
    if cols == 0 {
        return Err(Error::invalid_config("projection width must be at least 1"));
    }
    if kind == SketchKind::RowOrthonormalScaled && rank > cols {
        return Err(Error::invalid_config(format!(
            "row-orthonormal-scaled projection requires rank <= cols, got rank {rank} > cols {cols}"
        )));
    }
    let mut rng = rng::stream_rng(seed.0, Stream::Projection, &[layer_index as u64]);
    crate::memtrace::record(rank * cols);
    let entries = match kind {
        SketchKind::Gaussian => {
            let scale = (1.0 / rank as f64).sqrt();
            Array2::from_shape_simple_fn((rank, cols), || {
                scale * rng.sample::<f64, _>(StandardNormal)
            })
        }
        SketchKind::RowOrthonormalScaled => {
            let mut m = Array2::from_shape_simple_fn((rank, cols), || {
                rng.sample::<f64, _>(StandardNormal)
            });
            orthonormalize_rows(&mut m, &mut rng);
            let scale = (cols as f64 / rank as f64).sqrt();
            m *= scale;
            m
        }
    };
    Ok(ProjectionMatrix {
        entries,
        kind,
        seed,
    })
}

/// Generate one projection per layer width, all from the same seed.
pub fn gen_layer_projections(
    seed: Seed,
    rank: usize,
    layer_cols: &[usize],
    kind: SketchKind,
) -> Result<Vec<ProjectionMatrix>> {
    layer_cols
        .iter()
        .enumerate()
        .map(|(layer, &cols)| gen_projection(seed, rank, cols, kind, layer))
        .collect()
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. Gaussian rows
/// are almost surely independent; a row that cancels to numerical zero is
/// redrawn from the stream.
fn orthonormalize_rows(m: &mut Array2<f64>, rng: &mut impl Rng) {
    let rank = m.nrows();
    let cols = m.ncols();
    for i in 0..rank {
        loop {
            for _pass in 0..2 {
                for j in 0..i {
                    let dot = {
                        let (ri, rj) = (m.row(i), m.row(j));
                        ri.dot(&rj)
                    };
                    let rj = m.row(j).to_owned();
                    m.row_mut(i).scaled_add(-dot, &rj);
                }
            }
            let norm = m.row(i).dot(&m.row(i)).sqrt();
            if norm > 1e-12 * (cols as f64).sqrt() {
                m.row_mut(i).mapv_inplace(|v| v / norm);
                break;
            }
            for v in m.row_mut(i).iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_entry;
    use ndarray::Array2;

    #[test]
    fn pool_is_deterministic() {
        let a = make_seed_pool(Seed(7), 0, 3).unwrap();
        let b = make_seed_pool(Seed(7), 0, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pools_differ_across_rounds() {
        let a = make_seed_pool(Seed(7), 0, 3).unwrap();
        let b = make_seed_pool(Seed(7), 1, 3).unwrap();
        assert!(a.seeds().iter().zip(b.seeds()).any(|(x, y)| x != y));
    }

    #[test]
    fn empty_pool_is_rejected() {
        assert!(matches!(
            make_seed_pool(Seed(7), 0, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn square_orthonormal_projection_is_identity_gram() {
        let p = gen_projection(Seed(3), 4, 4, SketchKind::RowOrthonormalScaled, 0).unwrap();
        let gram = p.entries().dot(&p.entries().t());
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthonormal_kind_satisfies_scaled_gram() {
        let (rank, cols) = (3, 10);
        let p = gen_projection(Seed(11), rank, cols, SketchKind::RowOrthonormalScaled, 2).unwrap();
        let gram = p.entries().dot(&p.entries().t());
        let scale = cols as f64 / rank as f64;
        let mut err = 0.0f64;
        for i in 0..rank {
            for j in 0..rank {
                let expect = if i == j { scale } else { 0.0 };
                err += (gram[(i, j)] - expect).powi(2);
            }
        }
        let rel = err.sqrt() / (scale * (rank as f64).sqrt());
        assert!(rel < 1e-10, "relative Gram error {rel}");
    }

    #[test]
    fn orthonormal_rank_above_cols_is_rejected() {
        assert!(matches!(
            gen_projection(Seed(1), 5, 4, SketchKind::RowOrthonormalScaled, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn gaussian_rank_may_exceed_cols() {
        let p = gen_projection(Seed(1), 6, 4, SketchKind::Gaussian, 0).unwrap();
        assert_eq!(p.entries().dim(), (6, 4));
    }

    #[test]
    fn generation_is_pure() {
        for kind in [SketchKind::Gaussian, SketchKind::RowOrthonormalScaled] {
            let a = gen_projection(Seed(99), 2, 6, kind, 1).unwrap();
            let b = gen_projection(Seed(99), 2, 6, kind, 1).unwrap();
            assert_eq!(a.entries(), b.entries());
        }
    }

    #[test]
    fn layer_index_changes_entries() {
        let a = gen_projection(Seed(5), 2, 6, SketchKind::Gaussian, 0).unwrap();
        let b = gen_projection(Seed(5), 2, 6, SketchKind::Gaussian, 1).unwrap();
        assert_ne!(a.entries(), b.entries());
    }

    #[test]
    fn gaussian_entry_variance_matches_inverse_rank() {
        let (rank, cols) = (2, 8);
        let samples = 100_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let n_entries = (rank * cols * samples) as f64;
        for s in 0..samples {
            let p = gen_projection(Seed(s as u64), rank, cols, SketchKind::Gaussian, 0).unwrap();
            for v in p.entries().iter() {
                sum += v;
                sum_sq += v * v;
            }
        }
        let mean = sum / n_entries;
        let var = sum_sq / n_entries - mean * mean;
        let expect = 1.0 / rank as f64;
        assert!(
            (var - expect).abs() < 0.05 * expect,
            "variance {var}, expected {expect}"
        );
    }

    #[test]
    fn gram_average_converges_to_identity() {
        // Monte-Carlo mean of P^T P approaches I for both kinds.
        for kind in [SketchKind::Gaussian, SketchKind::RowOrthonormalScaled] {
            let (rank, cols) = (2, 8);
            let samples = 100_000usize;
            let mut acc = Array2::<f64>::zeros((cols, cols));
            for s in 0..samples {
                let p = gen_projection(Seed(s as u64), rank, cols, kind, 0).unwrap();
                acc += &p.entries().t().dot(p.entries());
            }
            acc /= samples as f64;
            let mut max_err = 0.0f64;
            for i in 0..cols {
                for j in 0..cols {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    max_err = max_err.max((acc[(i, j)] - expect).abs());
                }
            }
            assert!(max_err < 0.05, "{kind:?}: max entry error {max_err}");
        }
    }

    #[test]
    fn operator_norm_of_orthonormal_kind_is_pinned() {
        let (rank, cols) = (3, 12);
        let p = gen_projection(Seed(2), rank, cols, SketchKind::RowOrthonormalScaled, 0).unwrap();
        // P P^T = (cols/rank) I means every singular value is sqrt(cols/rank);
        // check through the Gram spectrum.
        let gram = p.entries().dot(&p.entries().t());
        let lambda = crate::linalg::spd_max_eigenvalue(&gram).unwrap();
        let expect = cols as f64 / rank as f64;
        assert!((lambda - expect).abs() < 1e-10 * expect);
        assert!(max_abs_entry(p.entries()) > 0.0);
    }
}
