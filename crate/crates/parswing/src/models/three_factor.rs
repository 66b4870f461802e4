//! Three-factor variant of the damped-volatility forward model.
//!
//! Each factor is an Ornstein-Uhlenbeck process with its own damping speed;
//! the driving Brownian motions are correlated. The spot is
//! `S_t = F(0,t) * exp(<vols, X_t> - 0.5 * var_t)` with
//! `var_t = sum_{i,j} rho_ij vols_i vols_j / (lambda_i + lambda_j)
//!          * (1 - exp(-(lambda_i + lambda_j) t))`.
//! Steps use the exact joint transition: the per-step innovation covariance
//! is factored with its symmetric square root.

use super::{symmetric_sqrt, PathSource};
use crate::EngineError;
use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const N_FACTORS: usize = 3;

#[derive(Debug, Clone)]
pub struct ThreeFactorModel {
    pub vols: [f64; N_FACTORS],
    pub mean_reversions: [f64; N_FACTORS],
    pub correlation: [[f64; N_FACTORS]; N_FACTORS],
    pub forwards: Vec<f64>,
    times: Vec<f64>,
    step_decay: Vec<[f64; N_FACTORS]>,
    /// Row-major symmetric square root of each step's innovation covariance.
    step_factor: Vec<[f64; N_FACTORS * N_FACTORS]>,
    log_var: Vec<f64>,
}

impl ThreeFactorModel {
    pub fn new(
        vols: [f64; N_FACTORS],
        mean_reversions: [f64; N_FACTORS],
        correlation: [[f64; N_FACTORS]; N_FACTORS],
        forwards: Vec<f64>,
        times: &[f64],
    ) -> Result<Self, EngineError> {
        for i in 0..N_FACTORS {
            if !(mean_reversions[i].is_finite() && mean_reversions[i] > 0.0) {
                return Err(EngineError::Config(format!(
                    "mean reversion {i} must be positive, got {}",
                    mean_reversions[i]
                )));
            }
            if !(vols[i].is_finite() && vols[i] >= 0.0) {
                return Err(EngineError::Config(format!("vol {i} must be non-negative, got {}", vols[i])));
            }
            if (correlation[i][i] - 1.0).abs() > 1e-9 {
                return Err(EngineError::Config("correlation diagonal must be 1".into()));
            }
            for j in 0..N_FACTORS {
                if (correlation[i][j] - correlation[j][i]).abs() > 1e-9 {
                    return Err(EngineError::Config("correlation matrix must be symmetric".into()));
                }
            }
        }
        if forwards.len() != times.len() || times.is_empty() {
            return Err(EngineError::Config(
                "forward curve and purchase-date grid must have the same non-zero length".into(),
            ));
        }
        if forwards.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(EngineError::Config("forward prices must be positive".into()));
        }

        let mut step_decay = Vec::with_capacity(times.len());
        let mut step_factor = Vec::with_capacity(times.len());
        let mut log_var = Vec::with_capacity(times.len());
        let mut prev_t = 0.0;
        for &t in times {
            let dt = t - prev_t;
            let mut decay = [0.0; N_FACTORS];
            for i in 0..N_FACTORS {
                decay[i] = (-mean_reversions[i] * dt).exp();
            }
            // Exact covariance of the innovation over one step:
            // rho_ij * (1 - exp(-(lambda_i + lambda_j) dt)) / (lambda_i + lambda_j).
            let mut cov = DMatrix::zeros(N_FACTORS, N_FACTORS);
            for i in 0..N_FACTORS {
                for j in 0..N_FACTORS {
                    let lam = mean_reversions[i] + mean_reversions[j];
                    cov[(i, j)] = correlation[i][j] * (1.0 - (-lam * dt).exp()) / lam;
                }
            }
            let (root, _) = symmetric_sqrt(&cov, -1e-10)
                .map_err(|_| EngineError::Config("correlation matrix is not positive semidefinite".into()))?;
            let mut factor = [0.0; N_FACTORS * N_FACTORS];
            for i in 0..N_FACTORS {
                for j in 0..N_FACTORS {
                    factor[i * N_FACTORS + j] = root[(i, j)];
                }
            }
            let mut v = 0.0;
            for i in 0..N_FACTORS {
                for j in 0..N_FACTORS {
                    let lam = mean_reversions[i] + mean_reversions[j];
                    v += correlation[i][j] * vols[i] * vols[j] / lam * (1.0 - (-lam * t).exp());
                }
            }
            step_decay.push(decay);
            step_factor.push(factor);
            log_var.push(v);
            prev_t = t;
        }
        Ok(ThreeFactorModel {
            vols,
            mean_reversions,
            correlation,
            forwards,
            times: times.to_vec(),
            step_decay,
            step_factor,
            log_var,
        })
    }

    /// Model with identical factors, a single pairwise correlation and a
    /// flat forward curve.
    pub fn symmetric(
        vol: f64,
        mean_reversion: f64,
        rho: f64,
        forward: f64,
        times: &[f64],
    ) -> Result<Self, EngineError> {
        let mut correlation = [[rho; N_FACTORS]; N_FACTORS];
        for i in 0..N_FACTORS {
            correlation[i][i] = 1.0;
        }
        Self::new(
            [vol; N_FACTORS],
            [mean_reversion; N_FACTORS],
            correlation,
            vec![forward; times.len()],
            times,
        )
    }

    /// Variance of `<vols, X_t>` at date index `l`.
    pub fn log_variance(&self, l: usize) -> f64 {
        self.log_var[l]
    }
}

impl PathSource for ThreeFactorModel {
    fn n_dates(&self) -> usize {
        self.times.len()
    }

    fn state_dim(&self) -> usize {
        N_FACTORS
    }

    fn times(&self) -> &[f64] {
        &self.times
    }

    fn date_forwards(&self) -> Option<&[f64]> {
        Some(&self.forwards)
    }

    fn fill_path(&self, rng: &mut ChaCha8Rng, spots: &mut [f64], states: &mut [f64]) {
        let mut x = [0.0; N_FACTORS];
        for l in 0..self.times.len() {
            let z: [f64; N_FACTORS] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            let factor = &self.step_factor[l];
            for i in 0..N_FACTORS {
                let mut innov = 0.0;
                for j in 0..N_FACTORS {
                    innov += factor[i * N_FACTORS + j] * z[j];
                }
                x[i] = self.step_decay[l][i] * x[i] + innov;
                states[l * N_FACTORS + i] = x[i];
            }
            let mut drift = 0.0;
            for i in 0..N_FACTORS {
                drift += self.vols[i] * x[i];
            }
            spots[l] = self.forwards[l] * (drift - 0.5 * self.log_var[l]).exp();
        }
    }
}
