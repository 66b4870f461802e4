//! Multi-curve model: one lognormal forward per delivery month.
//!
//! Factor `i` follows `dF(t,T_i)/F(t,T_i) = vol_i dW_i` with correlated
//! drivers, so `F(t,T_i) = F(0,T_i) * exp(vol_i W_i(t) - 0.5 vol_i^2 t)`.
//! The spot on a purchase date inside month `i` is the month-`i` forward
//! observed on that date. Market correlation tables are often published with
//! rounding noise: the matrix is symmetrized and, if needed, projected onto
//! the positive-semidefinite cone by clipping negative eigenvalues; the
//! model flags when that repair changed anything material.

use super::{symmetric_sqrt, PathSource};
use crate::EngineError;
use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Repair is flagged when symmetrization moves an entry by more than this.
const REPAIR_REPORT_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct MultiCurveModel {
    /// Annualized volatility per delivery-month factor.
    pub factor_vols: Vec<f64>,
    /// Forward price per delivery month at the valuation date.
    pub initial_forwards: Vec<f64>,
    /// Delivery-month factor index of each purchase date.
    pub date_factor: Vec<usize>,
    /// True when symmetrization or eigenvalue clipping moved the correlation
    /// matrix by more than the reporting tolerance.
    pub correlation_repaired: bool,
    times: Vec<f64>,
    forwards_by_date: Vec<f64>,
    /// Symmetric square root of the repaired correlation matrix, row-major.
    factor_root: Vec<f64>,
    n_factors: usize,
}

impl MultiCurveModel {
    /// Builds the model from raw market tables.
    ///
    /// `correlation` is the published matrix (row-major, any slight asymmetry
    /// is averaged out), `times` are the purchase dates measured from the
    /// valuation date and `date_factor[l]` names the delivery month of date `l`.
    pub fn new(
        factor_vols: Vec<f64>,
        correlation: Vec<Vec<f64>>,
        initial_forwards: Vec<f64>,
        times: &[f64],
        date_factor: Vec<usize>,
    ) -> Result<Self, EngineError> {
        let p = factor_vols.len();
        if p == 0 || initial_forwards.len() != p || correlation.len() != p {
            return Err(EngineError::Config(
                "factor vols, forwards and correlation must share one non-zero dimension".into(),
            ));
        }
        if correlation.iter().any(|row| row.len() != p) {
            return Err(EngineError::Config("correlation matrix must be square".into()));
        }
        if factor_vols.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(EngineError::Config("factor vols must be non-negative".into()));
        }
        if initial_forwards.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(EngineError::Config("initial forwards must be positive".into()));
        }
        if times.is_empty() || date_factor.len() != times.len() {
            return Err(EngineError::Config(
                "purchase dates and their delivery-month mapping must have the same length".into(),
            ));
        }
        if date_factor.iter().any(|i| *i >= p) {
            return Err(EngineError::Config("date_factor references a factor out of range".into()));
        }
        if times[0] < 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EngineError::Config("purchase dates must be non-negative and increasing".into()));
        }

        let mut sym = DMatrix::zeros(p, p);
        let mut max_shift: f64 = 0.0;
        for i in 0..p {
            if (correlation[i][i] - 1.0).abs() > 1e-6 {
                return Err(EngineError::Config(format!(
                    "correlation diagonal entry {i} must be 1, got {}",
                    correlation[i][i]
                )));
            }
            for j in 0..p {
                let avg = 0.5 * (correlation[i][j] + correlation[j][i]);
                max_shift = max_shift.max((avg - correlation[i][j]).abs());
                sym[(i, j)] = avg;
            }
        }
        // The symmetric root clips anything in [-1e-8, 0) to zero silently;
        // a genuinely indefinite matrix is still repaired but reported.
        let (root, min_eig) = symmetric_sqrt(&sym, f64::NEG_INFINITY)?;
        let correlation_repaired = max_shift > REPAIR_REPORT_TOL || min_eig < -REPAIR_REPORT_TOL;

        let mut factor_root = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                factor_root[i * p + j] = root[(i, j)];
            }
        }
        let forwards_by_date = date_factor.iter().map(|&i| initial_forwards[i]).collect();
        Ok(MultiCurveModel {
            factor_vols,
            initial_forwards,
            date_factor,
            correlation_repaired,
            times: times.to_vec(),
            forwards_by_date,
            factor_root,
            n_factors: p,
        })
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    /// Forward of factor `i` implied by the Brownian level `w` at time `t`.
    pub fn forward_at(&self, i: usize, w: f64, t: f64) -> f64 {
        self.initial_forwards[i] * (self.factor_vols[i] * w - 0.5 * self.factor_vols[i].powi(2) * t).exp()
    }
}

impl PathSource for MultiCurveModel {
    fn n_dates(&self) -> usize {
        self.times.len()
    }

    fn state_dim(&self) -> usize {
        self.n_factors
    }

    fn times(&self) -> &[f64] {
        &self.times
    }

    fn date_forwards(&self) -> Option<&[f64]> {
        Some(&self.forwards_by_date)
    }

    /// The forward-delta identity mixes exposures across delivery months
    /// here, so per-date deltas are not offered on this model.
    fn supports_forward_delta(&self) -> bool {
        false
    }

    fn fill_path(&self, rng: &mut ChaCha8Rng, spots: &mut [f64], states: &mut [f64]) {
        let p = self.n_factors;
        let mut w = vec![0.0; p];
        let mut z = vec![0.0; p];
        let mut prev_t = 0.0;
        for l in 0..self.times.len() {
            let t = self.times[l];
            let sqrt_dt = (t - prev_t).sqrt();
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(rng);
            }
            for i in 0..p {
                let row = &self.factor_root[i * p..(i + 1) * p];
                let mut innov = 0.0;
                for j in 0..p {
                    innov += row[j] * z[j];
                }
                w[i] += sqrt_dt * innov;
                states[l * p + i] = w[i];
            }
            let i = self.date_factor[l];
            spots[l] = self.forward_at(i, w[i], t);
            prev_t = t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{simulate_batch, StreamKey, DOMAIN_EVAL};

    fn two_factor_model(rho_ab: f64, rho_ba: f64) -> MultiCurveModel {
        MultiCurveModel::new(
            vec![0.3, 0.4],
            vec![vec![1.0, rho_ab], vec![rho_ba, 1.0]],
            vec![18.0, 21.0],
            &[0.5, 0.6, 0.7, 0.8],
            vec![0, 0, 1, 1],
        )
        .unwrap()
    }

    #[test]
    fn slight_asymmetry_is_averaged_without_flagging() {
        let model = two_factor_model(0.9001, 0.8999);
        assert!(!model.correlation_repaired);
    }

    #[test]
    fn large_asymmetry_is_flagged() {
        let model = two_factor_model(0.95, 0.80);
        assert!(model.correlation_repaired);
    }

    #[test]
    fn indefinite_matrix_is_clipped_and_flagged() {
        // Three factors, pairwise -0.9: eigenvalue 1 + 2 rho < 0.
        let model = MultiCurveModel::new(
            vec![0.3, 0.3, 0.3],
            vec![
                vec![1.0, -0.9, -0.9],
                vec![-0.9, 1.0, -0.9],
                vec![-0.9, -0.9, 1.0],
            ],
            vec![20.0, 20.0, 20.0],
            &[0.5, 0.6, 0.7],
            vec![0, 1, 2],
        )
        .unwrap();
        assert!(model.correlation_repaired);
        let batch = simulate_batch(&model, 128, StreamKey::new(2, DOMAIN_EVAL, 0, 0)).unwrap();
        assert!(batch.spots.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn forwards_are_martingales_per_factor() {
        let model = two_factor_model(0.9, 0.9);
        let batch = simulate_batch(&model, 200_000, StreamKey::new(23, DOMAIN_EVAL, 0, 0)).unwrap();
        // Check E[F(t, T_1)] = F(0, T_1) at the last date using the stored
        // Brownian levels.
        let l = 3;
        let t = model.times()[l];
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for m in 0..batch.n_paths {
            let w = batch.states_of(m)[l * 2];
            let f = model.forward_at(0, w, t);
            sum += f;
            sum_sq += f * f;
        }
        let mean = sum / batch.n_paths as f64;
        let var = sum_sq / batch.n_paths as f64 - mean * mean;
        let se = (var / batch.n_paths as f64).sqrt();
        assert!((mean - 18.0).abs() <= 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn spot_uses_the_delivery_month_forward() {
        let model = two_factor_model(0.9, 0.9);
        let batch = simulate_batch(&model, 16, StreamKey::new(29, DOMAIN_EVAL, 0, 0)).unwrap();
        for m in 0..batch.n_paths {
            let states = batch.states_of(m);
            // Dates 0-1 read factor 0, dates 2-3 read factor 1.
            for (l, &factor) in [0usize, 0, 1, 1].iter().enumerate() {
                let w = states[l * 2 + factor];
                let expected = model.forward_at(factor, w, model.times()[l]);
                assert_eq!(batch.spots_of(m)[l], expected);
            }
        }
    }
}
