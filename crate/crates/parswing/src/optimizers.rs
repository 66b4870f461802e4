//! Parameter-update rules with a constant learning rate.
//!
//! Three flavors: plain stochastic gradient descent, Adam, and preconditioned
//! stochastic gradient Langevin dynamics (PSGLD) — an RMSprop-style diagonal
//! preconditioner with injected preconditioned Gaussian noise, which turns the
//! descent into an approximate posterior sampler and in practice walks out of
//! shallow local maxima of the expected payoff.
//!
//! Every step first validates the gradient; a non-finite entry rejects the
//! step without touching parameters or moment state, so a failed iteration
//! can be reported and replayed.

use crate::models::StreamKey;
use crate::EngineError;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

fn check_grad(params: &[f64], grad: &[f64]) -> Result<(), EngineError> {
    if params.len() != grad.len() {
        return Err(EngineError::State(format!(
            "gradient has {} entries for {} parameters",
            grad.len(),
            params.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(EngineError::numeric(format!(
            "gradient entry {i} is non-finite ({}); step rejected",
            grad[i]
        )));
    }
    Ok(())
}

/// `theta <- theta - gamma * grad`.
pub fn sgd_step(params: &mut [f64], grad: &[f64], learning_rate: f64) -> Result<(), EngineError> {
    check_grad(params, grad)?;
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= learning_rate * g;
    }
    Ok(())
}

/// Adam moment state and hyperparameters.
///
/// The preconditioner divides by `eps_reg + sqrt(ms_hat)` — the regularizer
/// sits outside the square root. `strict_shifted_bias` reproduces a variant
/// that bias-corrects the moments of the *previous* step; its first step
/// never moves (both corrected moments are still zero). The default corrects
/// the freshly updated moments, which is the classic scheme.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    ms: Vec<f64>,
    step_count: u32,
    pub learning_rate: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub eps_reg: f64,
    pub strict_shifted_bias: bool,
}

impl AdamState {
    pub fn new(
        n_params: usize,
        learning_rate: f64,
        mu1: f64,
        mu2: f64,
        eps_reg: f64,
        strict_shifted_bias: bool,
    ) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            ms: vec![0.0; n_params],
            step_count: 0,
            learning_rate,
            mu1,
            mu2,
            eps_reg,
            strict_shifted_bias,
        }
    }

    pub fn step_count(&self) -> u32 {
        self.step_count
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), EngineError> {
        check_grad(params, grad)?;
        if self.m.len() != params.len() {
            return Err(EngineError::State(format!(
                "optimizer state holds {} moments for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let corr1 = 1.0 - self.mu1.powi(self.step_count as i32);
        let corr2 = 1.0 - self.mu2.powi(self.step_count as i32);
        for i in 0..params.len() {
            let g = grad[i];
            let m_prev = self.m[i];
            let ms_prev = self.ms[i];
            self.m[i] = self.mu1 * m_prev + (1.0 - self.mu1) * g;
            self.ms[i] = self.mu2 * ms_prev + (1.0 - self.mu2) * g * g;
            let (m_corr, ms_corr) = if self.strict_shifted_bias {
                (m_prev, ms_prev)
            } else {
                (self.m[i], self.ms[i])
            };
            let m_hat = m_corr / corr1;
            let ms_hat = ms_corr / corr2;
            params[i] -= self.learning_rate * m_hat / (self.eps_reg + ms_hat.sqrt());
        }
        Ok(())
    }
}

/// PSGLD state: the second-moment average, the noise stream, and
/// hyperparameters.
///
/// The drift is RMSprop-preconditioned descent, `-gamma * P * g` with
/// `P = 1/(eps_reg + sqrt(MS))`. The injected Gaussian noise has covariance
/// `sigma^2 * gamma * P` per coordinate (standard deviation
/// `sigma * sqrt(gamma) * sqrt(P)`), the form of RMSprop-preconditioned
/// Langevin dynamics, whose exploration is self-limiting: as a coordinate's
/// gradient history vanishes the kick grows only like `P^(1/2)`.
/// `squared_noise_covariance` selects a variant with covariance
/// `sigma^2 * gamma * P^2` (standard deviation proportional to `P` itself);
/// that form amplifies noise like `1/sqrt(MS)` as gradients shrink, so on
/// any coordinate whose gradient stays near zero — a converged parameter or
/// a dead rectifier unit — the kicks grow until only `eps_reg` caps them at
/// `sigma * sqrt(gamma) / eps_reg` per step, which destroys convergence for
/// the usual tiny `eps_reg`. It exists for comparison, not for production.
#[derive(Debug, Clone)]
pub struct PsgldState {
    ms: Vec<f64>,
    rng: ChaCha8Rng,
    pub learning_rate: f64,
    pub beta: f64,
    pub noise_scale: f64,
    pub eps_reg: f64,
    pub squared_noise_covariance: bool,
}

impl PsgldState {
    pub fn new(
        n_params: usize,
        learning_rate: f64,
        beta: f64,
        noise_scale: f64,
        eps_reg: f64,
        squared_noise_covariance: bool,
        noise_stream: StreamKey,
    ) -> Self {
        PsgldState {
            ms: vec![0.0; n_params],
            rng: noise_stream.rng(),
            learning_rate,
            beta,
            noise_scale,
            eps_reg,
            squared_noise_covariance,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), EngineError> {
        check_grad(params, grad)?;
        if self.ms.len() != params.len() {
            return Err(EngineError::State(format!(
                "optimizer state holds {} moments for {} parameters",
                self.ms.len(),
                params.len()
            )));
        }
        let noise_std = self.noise_scale * self.learning_rate.sqrt();
        for i in 0..params.len() {
            let g = grad[i];
            self.ms[i] = self.beta * self.ms[i] + (1.0 - self.beta) * g * g;
            let p = 1.0 / (self.eps_reg + self.ms[i].sqrt());
            let xi: f64 = StandardNormal.sample(&mut self.rng);
            let kick_scale = if self.squared_noise_covariance { p } else { p.sqrt() };
            params[i] += -(self.learning_rate * p * g) + noise_std * kick_scale * xi;
        }
        Ok(())
    }
}

/// A ready-to-run optimizer owning whatever state its rule needs.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { learning_rate: f64 },
    Adam(AdamState),
    Psgld(PsgldState),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), EngineError> {
        match self {
            Optimizer::Sgd { learning_rate } => sgd_step(params, grad, *learning_rate),
            Optimizer::Adam(state) => state.step(params, grad),
            Optimizer::Psgld(state) => state.step(params, grad),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd { .. } => "sgd",
            Optimizer::Adam(_) => "adam",
            Optimizer::Psgld(_) => "psgld",
        }
    }
}

fn default_learning_rate() -> f64 {
    0.1
}
fn default_mu1() -> f64 {
    0.9
}
fn default_mu2() -> f64 {
    0.999
}
fn default_eps_reg() -> f64 {
    1e-10
}
fn default_beta() -> f64 {
    0.8
}
fn default_noise_scale() -> f64 {
    1e-6
}

/// Optimizer selection and hyperparameters as they appear in a run
/// configuration; [`OptimizerConfig::build`] turns it into a live
/// [`Optimizer`] for a given parameter count and noise stream.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default = "default_learning_rate")]
        learning_rate: f64,
    },
    Adam {
        #[serde(default = "default_learning_rate")]
        learning_rate: f64,
        #[serde(default = "default_mu1")]
        mu1: f64,
        #[serde(default = "default_mu2")]
        mu2: f64,
        #[serde(default = "default_eps_reg")]
        eps_reg: f64,
        #[serde(default)]
        strict_shifted_bias: bool,
    },
    Psgld {
        #[serde(default = "default_learning_rate")]
        learning_rate: f64,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_noise_scale")]
        noise_scale: f64,
        #[serde(default = "default_eps_reg")]
        eps_reg: f64,
        #[serde(default)]
        squared_noise_covariance: bool,
    },
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let ok = match self {
            OptimizerConfig::Sgd { learning_rate } => learning_rate.is_finite() && *learning_rate > 0.0,
            OptimizerConfig::Adam { learning_rate, mu1, mu2, eps_reg, .. } => {
                learning_rate.is_finite()
                    && *learning_rate > 0.0
                    && (0.0..1.0).contains(mu1)
                    && (0.0..1.0).contains(mu2)
                    && *eps_reg > 0.0
            }
            OptimizerConfig::Psgld { learning_rate, beta, noise_scale, eps_reg, .. } => {
                learning_rate.is_finite()
                    && *learning_rate > 0.0
                    && (0.0..1.0).contains(beta)
                    && *noise_scale >= 0.0
                    && *eps_reg > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(EngineError::Config(format!("invalid optimizer hyperparameters: {self:?}")))
        }
    }

    /// Instantiates state for `n_params` parameters. `noise_seed` feeds the
    /// PSGLD noise stream; the other rules ignore it.
    pub fn build(&self, n_params: usize, noise_seed: StreamKey) -> Result<Optimizer, EngineError> {
        self.validate()?;
        Ok(match self {
            OptimizerConfig::Sgd { learning_rate } => Optimizer::Sgd { learning_rate: *learning_rate },
            OptimizerConfig::Adam { learning_rate, mu1, mu2, eps_reg, strict_shifted_bias } => {
                Optimizer::Adam(AdamState::new(
                    n_params,
                    *learning_rate,
                    *mu1,
                    *mu2,
                    *eps_reg,
                    *strict_shifted_bias,
                ))
            }
            OptimizerConfig::Psgld {
                learning_rate,
                beta,
                noise_scale,
                eps_reg,
                squared_noise_covariance,
            } => Optimizer::Psgld(PsgldState::new(
                n_params,
                *learning_rate,
                *beta,
                *noise_scale,
                *eps_reg,
                *squared_noise_covariance,
                noise_seed,
            )),
        })
    }
}
