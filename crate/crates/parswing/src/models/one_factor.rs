//! One-factor forward model with exponentially damped volatility.
//!
//! The forward follows `dF(t,T)/F(t,T) = vol * exp(-lambda (T - t)) dW`,
//! which makes the spot at a purchase date
//! `S_t = F(0,t) * exp(vol * X_t - 0.5 * var_t)` with `X` an
//! Ornstein-Uhlenbeck process started at zero and
//! `var_t = vol^2 * (1 - exp(-2 lambda t)) / (2 lambda)`.
//! `X` is advanced with its exact transition, so the grid spacing does not
//! bias the distribution.

use super::PathSource;
use crate::EngineError;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct OneFactorModel {
    /// Mean-reversion speed of the damping factor (per year).
    pub mean_reversion: f64,
    /// Spot volatility scale.
    pub vol: f64,
    /// Forward price for delivery at each purchase date.
    pub forwards: Vec<f64>,
    times: Vec<f64>,
    /// Per-step decay `exp(-lambda * dt)` of the driving process.
    step_decay: Vec<f64>,
    /// Per-step standard deviation of the exact transition.
    step_std: Vec<f64>,
    /// `vol^2 * (1 - exp(-2 lambda t)) / (2 lambda)` at each date.
    log_var: Vec<f64>,
}

impl OneFactorModel {
    pub fn new(
        mean_reversion: f64,
        vol: f64,
        forwards: Vec<f64>,
        times: &[f64],
    ) -> Result<Self, EngineError> {
        if !(mean_reversion.is_finite() && mean_reversion > 0.0) {
            return Err(EngineError::Config(format!(
                "mean reversion must be positive, got {mean_reversion}"
            )));
        }
        if !(vol.is_finite() && vol >= 0.0) {
            return Err(EngineError::Config(format!("vol must be non-negative, got {vol}")));
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
        let mut step_std = Vec::with_capacity(times.len());
        let mut log_var = Vec::with_capacity(times.len());
        let mut prev_t = 0.0;
        for &t in times {
            let dt = t - prev_t;
            step_decay.push((-mean_reversion * dt).exp());
            step_std.push(((1.0 - (-2.0 * mean_reversion * dt).exp()) / (2.0 * mean_reversion)).sqrt());
            log_var.push(vol * vol * (1.0 - (-2.0 * mean_reversion * t).exp()) / (2.0 * mean_reversion));
            prev_t = t;
        }
        Ok(OneFactorModel {
            mean_reversion,
            vol,
            forwards,
            times: times.to_vec(),
            step_decay,
            step_std,
            log_var,
        })
    }

    /// Model with a flat forward curve.
    pub fn flat(
        mean_reversion: f64,
        vol: f64,
        forward: f64,
        times: &[f64],
    ) -> Result<Self, EngineError> {
        Self::new(mean_reversion, vol, vec![forward; times.len()], times)
    }

    /// Variance of `vol * X_t` at date index `l`.
    pub fn log_variance(&self, l: usize) -> f64 {
        self.log_var[l]
    }

    /// Variance of the driving process `X` itself at date index `l`.
    pub fn factor_variance(&self, l: usize) -> f64 {
        (1.0 - (-2.0 * self.mean_reversion * self.times[l]).exp()) / (2.0 * self.mean_reversion)
    }
}

impl PathSource for OneFactorModel {
    fn n_dates(&self) -> usize {
        self.times.len()
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn times(&self) -> &[f64] {
        &self.times
    }

    fn date_forwards(&self) -> Option<&[f64]> {
        Some(&self.forwards)
    }

    fn fill_path(&self, rng: &mut ChaCha8Rng, spots: &mut [f64], states: &mut [f64]) {
        let mut x = 0.0;
        for l in 0..self.times.len() {
            let z: f64 = StandardNormal.sample(rng);
            x = self.step_decay[l] * x + self.step_std[l] * z;
            states[l] = x;
            spots[l] = self.forwards[l] * (self.vol * x - 0.5 * self.log_var[l]).exp();
        }
    }
}
