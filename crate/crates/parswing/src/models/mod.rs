//! Price models and path simulation.
//!
//! All models expose the same [`PathSource`] interface: given a per-path
//! random stream they fill one path of spot prices (and auxiliary state)
//! over the purchase-date grid. Batches are simulated in fixed-size blocks
//! so that results are reproducible regardless of thread count.

mod multi_curve;
mod one_factor;
mod rng;
mod three_factor;

pub use multi_curve::MultiCurveModel;
pub use one_factor::OneFactorModel;
pub use rng::{StreamKey, DOMAIN_CHECKPOINT_EVAL, DOMAIN_EVAL, DOMAIN_INIT, DOMAIN_OPT, DOMAIN_TRAIN};
pub use three_factor::ThreeFactorModel;

use crate::EngineError;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Number of paths per simulation block. Blocks are the unit of parallel
/// work and of deterministic result merging.
pub const BLOCK_PATHS: usize = 1024;

/// A stochastic model able to fill one spot path over the purchase dates.
pub trait PathSource: Sync {
    /// Number of purchase dates per path.
    fn n_dates(&self) -> usize;

    /// Number of auxiliary state values recorded per date (model factors).
    fn state_dim(&self) -> usize;

    /// Purchase dates in year fractions.
    fn times(&self) -> &[f64];

    /// Today's forward price for delivery at each purchase date, when the
    /// model has one.
    fn date_forwards(&self) -> Option<&[f64]>;

    /// Fills `spots` (length `n_dates`) and `states` (length
    /// `n_dates * state_dim`, date-major) for a single path.
    fn fill_path(&self, rng: &mut ChaCha8Rng, spots: &mut [f64], states: &mut [f64]);

    /// Whether the forward-delta identity `delta_k = E[q_k * S_k] / F_k`
    /// applies to this model.
    fn supports_forward_delta(&self) -> bool {
        self.date_forwards().is_some()
    }
}

/// A batch of simulated paths, path-major.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub n_paths: usize,
    pub n_dates: usize,
    pub state_dim: usize,
    /// `n_paths * n_dates` spot prices, path-major.
    pub spots: Vec<f64>,
    /// `n_paths * n_dates * state_dim` state values, path-major then date-major.
    pub states: Vec<f64>,
    /// Stream that produced the batch; replaying it reproduces the batch bitwise.
    pub stream: StreamKey,
}

impl PathBatch {
    /// Spot prices of path `m` over all dates.
    pub fn spots_of(&self, m: usize) -> &[f64] {
        &self.spots[m * self.n_dates..(m + 1) * self.n_dates]
    }

    /// State values of path `m` over all dates (empty when `state_dim == 0`).
    pub fn states_of(&self, m: usize) -> &[f64] {
        let w = self.n_dates * self.state_dim;
        &self.states[m * w..(m + 1) * w]
    }
}

/// Simulates `n_paths` independent paths from `source` under `stream`.
///
/// Path `m` always consumes the sub-stream of index `m`, so the same path
/// index reproduces the same path no matter how work is partitioned.
pub fn simulate_batch(
    source: &dyn PathSource,
    n_paths: usize,
    stream: StreamKey,
) -> Result<PathBatch, EngineError> {
    simulate_batch_range(source, 0, n_paths, stream)
}

/// [`simulate_batch`] for the path window `[first_path, first_path + n_paths)`
/// of the stream. Streaming a long evaluation through successive windows
/// visits exactly the paths a single huge batch would.
pub fn simulate_batch_range(
    source: &dyn PathSource,
    first_path: u64,
    n_paths: usize,
    stream: StreamKey,
) -> Result<PathBatch, EngineError> {
    let n = source.n_dates();
    let d = source.state_dim();
    let mut spots = vec![0.0; n_paths * n];
    let mut states = vec![0.0; n_paths * d * n];

    let fill_block = |b: usize, spot_chunk: &mut [f64], state_chunk: &mut [f64]| {
        let base = first_path as usize + b * BLOCK_PATHS;
        let in_block = spot_chunk.len() / n;
        for i in 0..in_block {
            let mut rng = stream.path_rng((base + i) as u64);
            let spot_row = &mut spot_chunk[i * n..(i + 1) * n];
            let state_row = if d == 0 {
                &mut [][..]
            } else {
                &mut state_chunk[i * d * n..(i + 1) * d * n]
            };
            source.fill_path(&mut rng, spot_row, state_row);
        }
    };
    if d == 0 {
        // No states to slice alongside; chunking an empty vector would
        // produce no blocks at all.
        spots
            .par_chunks_mut(BLOCK_PATHS * n)
            .enumerate()
            .for_each(|(b, spot_chunk)| fill_block(b, spot_chunk, &mut []));
    } else {
        spots
            .par_chunks_mut(BLOCK_PATHS * n)
            .zip(states.par_chunks_mut(BLOCK_PATHS * d * n))
            .enumerate()
            .for_each(|(b, (spot_chunk, state_chunk))| fill_block(b, spot_chunk, state_chunk));
    }

    if let Some(bad) = spots.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(EngineError::numeric(format!(
            "simulated spot {} on path {} is not a positive finite number",
            spots[bad],
            bad / n
        )));
    }
    Ok(PathBatch { n_paths, n_dates: n, state_dim: d, spots, states, stream })
}

/// Symmetric positive-semidefinite square root of a covariance matrix,
/// clipping eigenvalues below `floor` to zero.
///
/// The symmetric root is unique, so the factor does not depend on the
/// eigenvector ordering returned by the solver.
pub(crate) fn symmetric_sqrt(
    matrix: &nalgebra::DMatrix<f64>,
    floor: f64,
) -> Result<(nalgebra::DMatrix<f64>, f64), EngineError> {
    let eigen = matrix.clone().symmetric_eigen();
    let min_eig = eigen.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < floor {
        return Err(EngineError::Config(format!(
            "covariance matrix has eigenvalue {min_eig} below the allowed floor {floor}"
        )));
    }
    let sqrt_vals =
        nalgebra::DVector::from_iterator(eigen.eigenvalues.len(), eigen.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    let root = &eigen.eigenvectors * nalgebra::DMatrix::from_diagonal(&sqrt_vals) * eigen.eigenvectors.transpose();
    Ok((root, min_eig))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_reproducible_and_partition_independent() {
        let model = OneFactorModel::flat(4.0, 0.7, 20.0, &uniform_times(31, 31.0 / 365.0)).unwrap();
        let stream = StreamKey::new(7, DOMAIN_TRAIN, 0, 0);
        let a = simulate_batch(&model, 2000, stream).unwrap();
        let b = simulate_batch(&model, 2000, stream).unwrap();
        assert_eq!(a.spots, b.spots);
        // A shorter batch is a prefix of a longer one: path m depends only on
        // its own sub-stream.
        let c = simulate_batch(&model, 500, stream).unwrap();
        assert_eq!(c.spots[..], a.spots[..500 * 31]);
    }

    #[test]
    fn symmetric_sqrt_reproduces_the_matrix() {
        let m = nalgebra::DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.5, 0.3, 0.1, 0.3, 1.0]);
        let (root, min_eig) = symmetric_sqrt(&m, -1e-10).unwrap();
        assert!(min_eig > 0.0);
        let back = &root * root.transpose();
        for i in 0..3 {
            for j in 0..3 {
                assert!((back[(i, j)] - m[(i, j)]).abs() < 1e-12);
            }
        }
    }

    pub(crate) fn uniform_times(n: usize, maturity: f64) -> Vec<f64> {
        (0..n).map(|l| l as f64 * maturity / n as f64).collect()
    }
}
