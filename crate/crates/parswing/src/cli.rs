//! Command-line driver: JSON run configurations, named presets for the
//! reference experiments, and CSV/manifest outputs.
//!
//! Every run writes its artifacts into the output directory together with a
//! `run.json` manifest holding the fully resolved configuration, the seeds,
//! per-phase wall-clock times and a SHA-256 digest of each output file, so
//! any reported number can be reproduced from its manifest alone.

use crate::contract::ContractTerms;
use crate::models::{MultiCurveModel, OneFactorModel, PathSource, ThreeFactorModel};
use crate::optimizers::OptimizerConfig;
use crate::strategies::{DecisionMode, StrategyParams};
use crate::training::{
    aggregate_contract, train, transfer_params, BucketMap, TrainConfig, TrainReport,
};
use crate::valuation::{
    convergence_study, delta_forward, price, variance_study, PriceEstimate,
};
use crate::EngineError;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Purchase schedule and volume constraints of the contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractConfig {
    pub n_dates: usize,
    pub maturity: f64,
    #[serde(default)]
    pub q_min: f64,
    pub q_max: f64,
    pub global_min: f64,
    pub global_max: f64,
    pub strike: f64,
    /// First purchase date (year fraction); with `date_step`, overrides the
    /// even `l * maturity / n` grid for delivery starting after valuation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_date: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_step: Option<f64>,
}

impl ContractConfig {
    pub fn terms(&self) -> Result<ContractTerms, EngineError> {
        match (self.first_date, self.date_step) {
            (None, None) => ContractTerms::with_uniform_dates(
                self.n_dates,
                self.maturity,
                self.q_min,
                self.q_max,
                self.global_min,
                self.global_max,
                self.strike,
            ),
            (Some(first), Some(step)) => {
                let times = (0..self.n_dates).map(|l| first + l as f64 * step).collect();
                ContractTerms::with_dates(
                    times,
                    self.maturity,
                    self.q_min,
                    self.q_max,
                    self.global_min,
                    self.global_max,
                    self.strike,
                )
            }
            _ => Err(EngineError::Config(
                "first_date and date_step must be given together".into(),
            )),
        }
    }
}

/// Price model driving the simulations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Exponential Ornstein-Uhlenbeck factor around a flat forward curve.
    OneFactor { mean_reversion: f64, vol: f64, forward: f64 },
    /// Three exchangeable factors with one pairwise correlation.
    ThreeFactor { mean_reversion: f64, vol: f64, rho: f64, forward: f64 },
    /// One lognormal curve per delivery month, correlated across months.
    MultiCurve {
        factor_vols: Vec<f64>,
        /// Correlation matrix as published (fractions, possibly slightly
        /// asymmetric or indefinite; it is repaired on load and the repair
        /// is reported in the manifest).
        correlation: Vec<Vec<f64>>,
        forwards: Vec<f64>,
        /// Factor (delivery month) of each purchase date.
        date_factor: Vec<usize>,
    },
}

/// A model bound to a purchase-date grid.
pub struct BuiltModel {
    pub source: Box<dyn PathSource>,
    /// Whether loading had to repair the correlation matrix (multi-curve).
    pub correlation_repaired: Option<bool>,
}

impl ModelConfig {
    pub fn build(&self, times: &[f64]) -> Result<BuiltModel, EngineError> {
        match self {
            ModelConfig::OneFactor { mean_reversion, vol, forward } => Ok(BuiltModel {
                source: Box::new(OneFactorModel::flat(*mean_reversion, *vol, *forward, times)?),
                correlation_repaired: None,
            }),
            ModelConfig::ThreeFactor { mean_reversion, vol, rho, forward } => {
                let correlation = [
                    [1.0, *rho, *rho],
                    [*rho, 1.0, *rho],
                    [*rho, *rho, 1.0],
                ];
                Ok(BuiltModel {
                    source: Box::new(ThreeFactorModel::new(
                        [*vol; 3],
                        [*mean_reversion; 3],
                        correlation,
                        vec![*forward; times.len()],
                        times,
                    )?),
                    correlation_repaired: None,
                })
            }
            ModelConfig::MultiCurve { factor_vols, correlation, forwards, date_factor } => {
                let model = MultiCurveModel::new(
                    factor_vols.clone(),
                    correlation.clone(),
                    forwards.clone(),
                    times,
                    date_factor.clone(),
                )?;
                let repaired = model.correlation_repaired;
                Ok(BuiltModel {
                    source: Box::new(model),
                    correlation_repaired: Some(repaired),
                })
            }
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![10, 10]
}

/// Purchase strategy: which parameterization, and where its parameters come
/// from (fresh initialization or a saved file).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyConfig {
    /// Per-date affine score in (payoff, remaining capacity).
    PayoffVolume {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        load: Option<PathBuf>,
    },
    /// Feedforward network producing the three score coefficients.
    Network {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        /// Feed the model's state variables to the network as well.
        #[serde(default)]
        use_states: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        load: Option<PathBuf>,
    },
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig::PayoffVolume { load: None }
    }
}

impl StrategyConfig {
    pub fn load_path(&self) -> Option<&Path> {
        match self {
            StrategyConfig::PayoffVolume { load } | StrategyConfig::Network { load, .. } => {
                load.as_deref()
            }
        }
    }

    /// Initial parameters for `terms`: loaded from `load` when set,
    /// otherwise freshly initialized with `seed`.
    pub fn initial(
        &self,
        terms: &ContractTerms,
        model_state_dim: usize,
        seed: u64,
    ) -> Result<StrategyParams, EngineError> {
        if let Some(path) = self.load_path() {
            let text = std::fs::read_to_string(path)?;
            let (params, contract_n) = StrategyParams::from_json(&text)?;
            if contract_n != terms.n {
                return Err(EngineError::Config(format!(
                    "saved parameters are for a {contract_n}-date contract, not {}",
                    terms.n
                )));
            }
            params.check_compatible(terms, model_state_dim)?;
            return Ok(params);
        }
        match self {
            StrategyConfig::PayoffVolume { .. } => Ok(StrategyParams::payoff_volume(terms.n)),
            StrategyConfig::Network { hidden, use_states, .. } => {
                let state_dim = if *use_states { model_state_dim } else { 0 };
                StrategyParams::network(hidden, state_dim, seed)
            }
        }
    }
}

fn default_eval_paths() -> usize {
    100_000
}
fn default_eval_mode() -> DecisionMode {
    DecisionMode::BangBang
}

/// Out-of-sample evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_paths")]
    pub n_paths: usize,
    #[serde(default = "default_eval_mode")]
    pub mode: DecisionMode,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_paths: default_eval_paths(), mode: default_eval_mode(), seed: 0 }
    }
}

/// Aggregated-contract pretraining settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// Dates per bucket, in order (for example days per calendar month).
    pub bucket_lengths: Vec<usize>,
    pub aggregated_iterations: usize,
    pub daily_iterations: usize,
}

fn default_convergence_eval_paths() -> usize {
    1 << 17
}

/// Convergence-order study settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Iteration checkpoints; each doubling pair present contributes a
    /// regression point.
    pub checkpoints: Vec<usize>,
    #[serde(default = "default_convergence_eval_paths")]
    pub eval_paths: usize,
}

/// Replication-variance study settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceConfig {
    pub replications: usize,
    pub eval_grid: Vec<usize>,
}

/// A fully described run. Presets are values of this type; `--set` overrides
/// individual fields by dotted path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub contract: ContractConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<VarianceConfig>,
    /// Output directory for CSVs and the manifest (default: current).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

// ---------------------------------------------------------------------------
// Presets

/// Calendar month lengths of the 2022 delivery year.
const MONTH_LENGTHS: [usize; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
/// Days from the multi-curve valuation date (2021-03-17) to 2022-01-01.
const MULTI_CURVE_START_DAYS: f64 = 290.0;
/// Squared instantaneous volatility per delivery month, in percent.
const MONTH_VOL2_PERCENT: [f64; 12] = [
    45.09, 44.88, 42.63, 40.57, 36.99, 34.37, 31.18, 29.59, 30.22, 30.60, 31.05, 30.25,
];
/// Initial forward price per delivery month.
const MONTH_FORWARDS: [f64; 12] = [
    20.07, 20.0, 19.6, 17.4, 16.75, 16.5, 16.56, 16.53, 16.71, 17.31, 18.31, 18.64,
];
/// Published monthly correlation matrix, in percent (kept verbatim,
/// including its small asymmetries; loading symmetrizes it).
const MONTH_CORRELATION_PERCENT: [[f64; 12]; 12] = [
    [100.0, 99.62, 98.61, 91.12, 91.12, 91.12, 90.24, 90.24, 90.24, 87.2, 87.2, 87.2],
    [99.62, 100.0, 98.91, 91.65, 91.65, 91.65, 90.68, 90.68, 90.68, 87.8, 87.8, 87.8],
    [98.61, 98.61, 100.0, 93.89, 93.89, 93.89, 92.79, 92.79, 92.79, 89.94, 89.94, 89.94],
    [91.12, 91.65, 93.89, 100.0, 100.0, 100.0, 99.47, 99.47, 99.47, 97.06, 97.06, 97.06],
    [91.12, 91.65, 93.89, 100.0, 100.0, 100.0, 99.47, 99.47, 99.47, 97.06, 97.06, 97.06],
    [91.12, 91.65, 93.89, 100.0, 100.0, 100.0, 99.47, 99.47, 99.47, 97.06, 97.06, 97.06],
    [90.24, 90.68, 92.79, 99.4, 99.47, 99.4, 100.0, 100.0, 100.0, 97.32, 97.32, 97.32],
    [90.24, 90.68, 92.79, 99.47, 99.47, 99.47, 100.0, 100.0, 100.0, 97.32, 97.32, 97.32],
    [90.24, 90.68, 92.79, 99.47, 99.47, 99.47, 100.0, 100.0, 100.0, 97.32, 97.32, 97.32],
    [87.2, 87.8, 89.94, 97.06, 97.06, 97.06, 97.32, 97.32, 97.32, 100.0, 100.0, 100.0],
    [87.2, 87.8, 89.94, 97.06, 97.06, 97.06, 97.32, 97.32, 97.32, 100.0, 100.0, 100.0],
    [87.2, 87.8, 89.94, 97.06, 97.06, 97.06, 97.32, 97.32, 97.32, 100.0, 100.0, 100.0],
];

fn psgld() -> OptimizerConfig {
    OptimizerConfig::Psgld {
        learning_rate: 0.1,
        beta: 0.8,
        noise_scale: 1e-6,
        eps_reg: 1e-10,
        squared_noise_covariance: false,
    }
}

fn adam() -> OptimizerConfig {
    OptimizerConfig::Adam {
        learning_rate: 0.1,
        mu1: 0.9,
        mu2: 0.999,
        eps_reg: 1e-10,
        strict_shifted_bias: false,
    }
}

fn network(hidden: Vec<usize>, use_states: bool) -> StrategyConfig {
    StrategyConfig::Network { hidden, use_states, load: None }
}

fn train_block(iterations: usize, optimizer: OptimizerConfig) -> TrainConfig {
    TrainConfig { iterations, batch_size: 1 << 14, batches_per_iter: 1, optimizer, seed: 0 }
}

fn eval_block(n_paths: usize) -> EvalConfig {
    EvalConfig { n_paths, mode: DecisionMode::BangBang, seed: 1 }
}

// The reference experiments put the purchase dates on a daily grid with the
// first purchase one day after valuation: t_l = (l + 1)/365. The first spot
// is then already random, which the published prices require (a grid starting
// at t = 0 freezes the first date's spot at the forward and prices the case-1
// contract visibly below the published confidence intervals).
fn case1_contract() -> ContractConfig {
    ContractConfig {
        n_dates: 31,
        maturity: 32.0 / 365.0,
        q_min: 0.0,
        q_max: 6.0,
        global_min: 140.0,
        global_max: 200.0,
        strike: 20.0,
        first_date: Some(1.0 / 365.0),
        date_step: Some(1.0 / 365.0),
    }
}

fn case2_contract() -> ContractConfig {
    ContractConfig {
        n_dates: 365,
        maturity: 366.0 / 365.0,
        q_min: 0.0,
        q_max: 6.0,
        global_min: 1300.0,
        global_max: 1900.0,
        strike: 20.0,
        first_date: Some(1.0 / 365.0),
        date_step: Some(1.0 / 365.0),
    }
}

fn flat_one_factor(forward: f64) -> ModelConfig {
    ModelConfig::OneFactor { mean_reversion: 4.0, vol: 0.7, forward }
}

fn base_config(contract: ContractConfig, model: ModelConfig) -> RunConfig {
    RunConfig {
        contract,
        model,
        strategy: StrategyConfig::default(),
        train: train_block(1000, psgld()),
        eval: eval_block(1_000_000),
        transfer: None,
        convergence: None,
        variance: None,
        output: None,
        threads: None,
    }
}

/// The named reference configurations.
pub fn preset(name: &str) -> Result<RunConfig, EngineError> {
    let lower = name.to_ascii_lowercase();
    if let Some(rho) = lower.strip_prefix("threefactor-") {
        let rho: f64 = rho
            .parse()
            .map_err(|_| EngineError::Config(format!("cannot parse a correlation from {name:?}")))?;
        let mut cfg = base_config(
            case1_contract(),
            ModelConfig::ThreeFactor { mean_reversion: 1.5, vol: 0.7, rho, forward: 20.0 },
        );
        cfg.train = train_block(1000, psgld());
        return Ok(cfg);
    }
    let mut cfg = match lower.as_str() {
        "case1-pv-psgld" => base_config(case1_contract(), flat_one_factor(20.0)),
        "case1-pv-adam" => {
            let mut cfg = base_config(case1_contract(), flat_one_factor(20.0));
            cfg.train = train_block(3000, adam());
            cfg
        }
        "case1-nn-psgld" => {
            let mut cfg = base_config(case1_contract(), flat_one_factor(20.0));
            cfg.strategy = network(vec![10, 10], false);
            cfg
        }
        "case1-nn-adam" => {
            let mut cfg = base_config(case1_contract(), flat_one_factor(20.0));
            cfg.strategy = network(vec![10, 10], false);
            cfg.train = train_block(1000, adam());
            cfg
        }
        "case2-pv" => base_config(case2_contract(), flat_one_factor(20.0)),
        "case2-nn" => {
            let mut cfg = base_config(case2_contract(), flat_one_factor(20.0));
            cfg.strategy = network(vec![10, 10], false);
            cfg
        }
        "case2-transfer" => {
            let mut cfg = base_config(case2_contract(), flat_one_factor(20.0));
            cfg.transfer = Some(TransferConfig {
                bucket_lengths: MONTH_LENGTHS.to_vec(),
                aggregated_iterations: 500,
                daily_iterations: 300,
            });
            cfg
        }
        "market-moves-m1" => {
            let mut cfg = base_config(case2_contract(), flat_one_factor(22.0));
            cfg.train = train_block(300, psgld());
            cfg
        }
        "market-moves-m2" => {
            let mut contract = case2_contract();
            contract.global_min = 1400.0;
            contract.global_max = 2000.0;
            let mut cfg = base_config(contract, flat_one_factor(20.0));
            cfg.train = train_block(300, psgld());
            cfg
        }
        "market-moves-m3" => {
            let mut contract = case2_contract();
            contract.strike = 18.0;
            let mut cfg = base_config(contract, flat_one_factor(20.0));
            cfg.train = train_block(300, psgld());
            cfg
        }
        "multicurve-2022" => {
            let contract = ContractConfig {
                n_dates: 365,
                maturity: (MULTI_CURVE_START_DAYS + 365.0) / 365.0,
                q_min: 0.0,
                q_max: 1.0,
                global_min: 180.0,
                global_max: 270.0,
                strike: 17.865,
                first_date: Some(MULTI_CURVE_START_DAYS / 365.0),
                date_step: Some(1.0 / 365.0),
            };
            let date_factor = MONTH_LENGTHS
                .iter()
                .enumerate()
                .flat_map(|(month, len)| std::iter::repeat_n(month, *len))
                .collect();
            let model = ModelConfig::MultiCurve {
                factor_vols: MONTH_VOL2_PERCENT.iter().map(|v2| (v2 / 100.0).sqrt()).collect(),
                correlation: MONTH_CORRELATION_PERCENT
                    .iter()
                    .map(|row| row.iter().map(|c| c / 100.0).collect())
                    .collect(),
                forwards: MONTH_FORWARDS.to_vec(),
                date_factor,
            };
            let mut cfg = base_config(contract, model);
            cfg.strategy = network(vec![50, 50], true);
            cfg
        }
        "convergence" => {
            let mut cfg = base_config(case1_contract(), flat_one_factor(20.0));
            cfg.train = train_block(1000, adam());
            cfg.convergence = Some(ConvergenceConfig {
                checkpoints: vec![25, 50, 100, 200, 400, 800],
                eval_paths: default_convergence_eval_paths(),
            });
            cfg
        }
        "variance" => {
            let mut cfg = base_config(case1_contract(), flat_one_factor(20.0));
            cfg.variance = Some(VarianceConfig {
                replications: 20,
                eval_grid: vec![10_000, 100_000, 1_000_000],
            });
            cfg
        }
        _ => return Err(EngineError::Config(format!("unknown preset {name:?}"))),
    };
    // All presets run bang-bang evaluation with a fixed evaluation seed.
    cfg.eval.seed = 1;
    Ok(cfg)
}

/// Names accepted by [`preset`], for `--help` and error messages.
pub const PRESET_NAMES: [&str; 16] = [
    "case1-pv-adam",
    "case1-pv-psgld",
    "case1-nn-adam",
    "case1-nn-psgld",
    "case2-pv",
    "case2-nn",
    "case2-transfer",
    "market-moves-m1",
    "market-moves-m2",
    "market-moves-m3",
    "threefactor-0.6",
    "threefactor-0.3",
    "threefactor--0.2",
    "multicurve-2022",
    "convergence",
    "variance",
];

// ---------------------------------------------------------------------------
// Argument parsing and dispatch

#[derive(Debug, Parser)]
#[command(
    name = "parswing",
    about = "Swing option pricing with parametric purchase strategies",
    after_help = "Presets: case1-pv-{adam,psgld}, case1-nn-{adam,psgld}, case2-{pv,nn},\n\
        case2-transfer, market-moves-{m1,m2,m3}, threefactor-<rho>, multicurve-2022,\n\
        convergence, variance"
)]
pub struct Cli {
    /// JSON run configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named reference configuration (alternative to --config).
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Dotted-path override, e.g. --set train.iterations=50.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (overrides the config; default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a strategy and save its parameters.
    Train,
    /// Price a strategy (training it first unless loaded with 0 iterations).
    Price,
    /// Per-date forward deltas of a strategy.
    Delta,
    /// Aggregated pretraining, parameter transfer, daily training, pricing.
    Transfer,
    /// Iteration-convergence study.
    Convergence,
    /// Train/evaluate replication study across evaluation sizes.
    Variance,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Price => "price",
            Command::Delta => "delta",
            Command::Transfer => "transfer",
            Command::Convergence => "convergence",
            Command::Variance => "variance",
        }
    }
}

/// Applies one `key=value` override to the JSON form of the config.
fn apply_override(root: &mut serde_json::Value, assignment: &str) -> Result<(), EngineError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        EngineError::Config(format!("override {assignment:?} is not of the form key=value"))
    })?;
    let parsed: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| {
            EngineError::Config(format!("cannot set {key:?}: {part:?} is not an object field"))
        })?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        let entry = map.entry(part.to_string()).or_insert(serde_json::Value::Null);
        if !entry.is_object() {
            *entry = serde_json::Value::Object(serde_json::Map::new());
        }
        cursor = entry;
    }
    Ok(())
}

/// Resolves the run configuration from preset/config file plus overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, EngineError> {
    let mut value = match (&cli.config, &cli.preset) {
        (Some(_), Some(_)) => {
            return Err(EngineError::Config("give either --config or --preset, not both".into()))
        }
        (None, None) => {
            return Err(EngineError::Config("a run needs --config FILE or --preset NAME".into()))
        }
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| EngineError::Config(format!("cannot parse {}: {e}", path.display())))?
        }
        (None, Some(name)) => serde_json::to_value(preset(name)?)
            .map_err(|e| EngineError::Config(format!("cannot encode preset: {e}")))?,
    };
    for assignment in &cli.set {
        apply_override(&mut value, assignment)?;
    }
    let mut config: RunConfig = serde_json::from_value(value)
        .map_err(|e| EngineError::Config(format!("invalid run configuration: {e}")))?;
    if let Some(out) = &cli.out {
        config.output = Some(out.clone());
    }
    if let Some(threads) = cli.threads {
        config.threads = Some(threads);
    }
    Ok(config)
}

// ---------------------------------------------------------------------------
// Output writing

/// Collected facts of one run, written as `run.json`.
#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    engine_version: String,
    threads: usize,
    train_seed: u64,
    eval_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    correlation_repaired: Option<bool>,
    config: RunConfig,
    /// Wall-clock milliseconds per phase.
    wall_ms: BTreeMap<String, f64>,
    /// Headline numbers of the run (prices, slopes, ...).
    results: BTreeMap<String, serde_json::Value>,
    /// SHA-256 of every written output file.
    outputs: BTreeMap<String, String>,
}

struct OutputDir {
    dir: PathBuf,
    hashes: BTreeMap<String, String>,
}

impl OutputDir {
    fn create(dir: &Path) -> Result<Self, EngineError> {
        std::fs::create_dir_all(dir)?;
        Ok(OutputDir { dir: dir.to_path_buf(), hashes: BTreeMap::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), EngineError> {
        std::fs::write(self.dir.join(name), bytes)?;
        let digest = Sha256::digest(bytes);
        self.hashes.insert(name.into(), digest.iter().map(|b| format!("{b:02x}")).collect());
        Ok(())
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn mode_name(mode: DecisionMode) -> &'static str {
    match mode {
        DecisionMode::Smooth => "smooth",
        DecisionMode::BangBang => "bang_bang",
    }
}

fn write_trace(out: &mut OutputDir, name: &str, report: &TrainReport) -> Result<(), EngineError> {
    let rows = report
        .trace
        .iter()
        .map(|r| vec![r.iteration.to_string(), fmt(r.reward), fmt(r.wall_ms)])
        .collect::<Vec<_>>();
    out.write(name, &csv_bytes(&["iteration", "u_n", "wall_ms"], &rows))
}

fn write_price(
    out: &mut OutputDir,
    estimate: &PriceEstimate,
    eval_wall_ms: f64,
) -> Result<(), EngineError> {
    let row = vec![
        mode_name(estimate.mode).to_string(),
        fmt(estimate.mean),
        fmt(estimate.std_error),
        fmt(estimate.ci95.0),
        fmt(estimate.ci95.1),
        estimate.sample_count.to_string(),
        fmt(eval_wall_ms),
    ];
    out.write("price.csv", &csv_bytes(&["mode", "mean", "se", "ci_lo", "ci_hi", "m_e", "wall_ms"], &[row]))
}

fn write_params(
    out: &mut OutputDir,
    params: &StrategyParams,
    contract_n: usize,
) -> Result<(), EngineError> {
    out.write("params.json", params.to_json(contract_n).as_bytes())
}

fn price_results(estimate: &PriceEstimate) -> BTreeMap<String, serde_json::Value> {
    let mut results = BTreeMap::new();
    results.insert("price".into(), estimate.mean.into());
    results.insert("std_error".into(), estimate.std_error.into());
    results.insert("ci_lo".into(), estimate.ci95.0.into());
    results.insert("ci_hi".into(), estimate.ci95.1.into());
    results
}

// ---------------------------------------------------------------------------
// Command execution

/// Runs a parsed invocation end to end and writes its artifacts.
pub fn run(cli: &Cli) -> Result<(), EngineError> {
    let config = resolve_config(cli)?;
    if let Some(threads) = config.threads {
        // In-process callers may have installed a pool already; the explicit
        // setting is best-effort then.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let terms = config.contract.terms()?;
    let model = config.model.build(&terms.exercise_times)?;
    let out_dir = config.output.clone().unwrap_or_else(|| PathBuf::from("."));
    let mut out = OutputDir::create(&out_dir)?;
    let mut manifest = Manifest {
        command: cli.command.name().into(),
        engine_version: env!("CARGO_PKG_VERSION").into(),
        threads: rayon::current_num_threads(),
        train_seed: config.train.seed,
        eval_seed: config.eval.seed,
        correlation_repaired: model.correlation_repaired,
        config: config.clone(),
        wall_ms: BTreeMap::new(),
        results: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };

    match cli.command {
        Command::Train => {
            let initial = config.strategy.initial(&terms, model.source.state_dim(), config.train.seed)?;
            let started = Instant::now();
            let (params, report) = train(&terms, model.source.as_ref(), initial, &config.train)?;
            manifest.wall_ms.insert("train".into(), started.elapsed().as_secs_f64() * 1e3);
            write_params(&mut out, &params, terms.n)?;
            write_trace(&mut out, "train_trace.csv", &report)?;
            if let Some(last) = report.trace.last() {
                manifest.results.insert("final_in_sample_reward".into(), last.reward.into());
            }
        }
        Command::Price | Command::Delta => {
            let (params, report) = obtain_params(&config, &terms, &model, &mut manifest)?;
            if let Some(report) = &report {
                write_trace(&mut out, "train_trace.csv", report)?;
                write_params(&mut out, &params, terms.n)?;
            }
            let started = Instant::now();
            if cli.command == Command::Price {
                let estimate = price(
                    &terms,
                    model.source.as_ref(),
                    &params,
                    config.eval.n_paths,
                    config.eval.mode,
                    config.eval.seed,
                )?;
                let eval_ms = started.elapsed().as_secs_f64() * 1e3;
                manifest.wall_ms.insert("evaluate".into(), eval_ms);
                write_price(&mut out, &estimate, eval_ms)?;
                manifest.results = price_results(&estimate);
            } else {
                let curve = delta_forward(
                    &terms,
                    model.source.as_ref(),
                    &params,
                    config.eval.n_paths,
                    config.eval.mode,
                    config.eval.seed,
                )?;
                manifest.wall_ms.insert("evaluate".into(), started.elapsed().as_secs_f64() * 1e3);
                let rows = (0..terms.n)
                    .map(|k| {
                        vec![
                            k.to_string(),
                            fmt(curve.times[k]),
                            fmt(curve.deltas[k]),
                            fmt(curve.std_errors[k]),
                        ]
                    })
                    .collect::<Vec<_>>();
                out.write("delta.csv", &csv_bytes(&["date_index", "time", "delta", "se"], &rows))?;
            }
        }
        Command::Transfer => {
            let transfer = config.transfer.clone().ok_or_else(|| {
                EngineError::Config("the transfer subcommand needs a transfer block".into())
            })?;
            if config.strategy.load_path().is_some() {
                return Err(EngineError::Config(
                    "transfer pretrains from scratch; drop strategy.load".into(),
                ));
            }
            let map = BucketMap::new(transfer.bucket_lengths.clone())?;
            let agg_terms = aggregate_contract(&terms, &map)?;
            let agg_model = config.model.build(&agg_terms.exercise_times)?;
            let agg_initial =
                config.strategy.initial(&agg_terms, agg_model.source.state_dim(), config.train.seed)?;
            let mut agg_train = config.train.clone();
            agg_train.iterations = transfer.aggregated_iterations;
            let started = Instant::now();
            let (agg_params, agg_report) =
                train(&agg_terms, agg_model.source.as_ref(), agg_initial, &agg_train)?;
            manifest.wall_ms.insert("aggregated_train".into(), started.elapsed().as_secs_f64() * 1e3);
            write_trace(&mut out, "aggregated_trace.csv", &agg_report)?;

            let daily_initial = transfer_params(&agg_params, &map, &terms)?;
            let mut daily_train = config.train.clone();
            daily_train.iterations = transfer.daily_iterations;
            let started = Instant::now();
            let (params, report) = if transfer.daily_iterations > 0 {
                train(&terms, model.source.as_ref(), daily_initial, &daily_train)?
            } else {
                (daily_initial, TrainReport::default())
            };
            manifest.wall_ms.insert("daily_train".into(), started.elapsed().as_secs_f64() * 1e3);
            write_trace(&mut out, "train_trace.csv", &report)?;
            write_params(&mut out, &params, terms.n)?;

            let started = Instant::now();
            let estimate = price(
                &terms,
                model.source.as_ref(),
                &params,
                config.eval.n_paths,
                config.eval.mode,
                config.eval.seed,
            )?;
            let eval_ms = started.elapsed().as_secs_f64() * 1e3;
            manifest.wall_ms.insert("evaluate".into(), eval_ms);
            write_price(&mut out, &estimate, eval_ms)?;
            manifest.results = price_results(&estimate);
        }
        Command::Convergence => {
            let study_cfg = config.convergence.clone().ok_or_else(|| {
                EngineError::Config("the convergence subcommand needs a convergence block".into())
            })?;
            let initial = config.strategy.initial(&terms, model.source.state_dim(), config.train.seed)?;
            let started = Instant::now();
            let study = convergence_study(
                &terms,
                model.source.as_ref(),
                initial,
                &config.train,
                &study_cfg.checkpoints,
                study_cfg.eval_paths,
            )?;
            manifest.wall_ms.insert("study".into(), started.elapsed().as_secs_f64() * 1e3);
            let rows = study
                .points
                .iter()
                .map(|p| vec![fmt(p.log_n), fmt(p.log_abs_diff)])
                .collect::<Vec<_>>();
            out.write("convergence.csv", &csv_bytes(&["log_n", "log_abs_diff"], &rows))?;
            manifest.results.insert("alpha".into(), study.alpha.into());
            manifest.results.insert("dropped_pairs".into(), study.dropped.into());
        }
        Command::Variance => {
            let study_cfg = config.variance.clone().ok_or_else(|| {
                EngineError::Config("the variance subcommand needs a variance block".into())
            })?;
            let initial = config.strategy.initial(&terms, model.source.state_dim(), config.train.seed)?;
            let started = Instant::now();
            let levels = variance_study(
                &terms,
                model.source.as_ref(),
                &initial,
                &config.train,
                study_cfg.replications,
                &study_cfg.eval_grid,
                config.eval.mode,
            )?;
            manifest.wall_ms.insert("study".into(), started.elapsed().as_secs_f64() * 1e3);
            let mut rows = Vec::new();
            let mut summary = Vec::new();
            for level in &levels {
                for (r, p) in level.prices.iter().enumerate() {
                    rows.push(vec![level.n_paths.to_string(), r.to_string(), fmt(*p)]);
                }
                summary.push(serde_json::json!({
                    "m_e": level.n_paths,
                    "mean": level.mean,
                    "std": level.std,
                }));
            }
            out.write("variance.csv", &csv_bytes(&["m_e", "replication", "price"], &rows))?;
            manifest.results.insert("levels".into(), summary.into());
        }
    }

    manifest.outputs = out.hashes.clone();
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| EngineError::Config(format!("cannot encode the manifest: {e}")))?;
    std::fs::write(out_dir.join("run.json"), manifest_bytes)?;
    Ok(())
}

/// Parameters for price/delta: loaded and/or trained per the config.
///
/// `train.iterations = 0` evaluates the initial (typically loaded)
/// parameters as they are; a positive count trains them first — a warm
/// start when they were loaded, a full training otherwise.
fn obtain_params(
    config: &RunConfig,
    terms: &ContractTerms,
    model: &BuiltModel,
    manifest: &mut Manifest,
) -> Result<(StrategyParams, Option<TrainReport>), EngineError> {
    let initial = config.strategy.initial(terms, model.source.state_dim(), config.train.seed)?;
    if config.train.iterations == 0 {
        return Ok((initial, None));
    }
    let started = Instant::now();
    let (params, report) = train(terms, model.source.as_ref(), initial, &config.train)?;
    manifest.wall_ms.insert("train".into(), started.elapsed().as_secs_f64() * 1e3);
    Ok((params, Some(report)))
}

/// Entry point for the binary: parses arguments, runs, maps errors to exit
/// codes (2 config, 3 numeric, 4 infeasible).
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}
