//! Pricing engine for swing (take-or-pay) contracts.
//!
//! The engine prices a swing contract by training a parametric purchase
//! strategy on simulated price paths and then valuing the trained strategy by
//! streaming Monte Carlo. Two strategy families are provided (an explicit
//! payoff/volume rule and a small feed-forward network), trained with
//! stochastic-gradient optimizers on gradients obtained from a reverse-mode
//! tape. A lattice dynamic-programming solver provides exact reference values
//! on small instances.

pub mod autodiff;
pub mod cli;
pub mod contract;
mod error;
pub mod models;
pub mod optimizers;
pub mod oracle;
pub mod strategies;
pub mod training;
pub mod valuation;

pub use error::EngineError;
