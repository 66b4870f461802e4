//! Out-of-sample pricing, forward deltas, and the two empirical studies
//! (iteration-convergence rate, evaluation-size variance).
//!
//! Evaluation never materializes the full path set: paths stream through
//! fixed windows of a long per-path stream, and each window folds into
//! running moments. Price and delta estimates are therefore O(window) in
//! memory no matter how many paths are requested, and bitwise independent of
//! thread count (windows merge in index order; blocks inside a window
//! already do).

use crate::contract::{build_corridor, ContractTerms};
use crate::models::{
    simulate_batch, simulate_batch_range, PathSource, StreamKey, DOMAIN_CHECKPOINT_EVAL,
    DOMAIN_EVAL,
};
use crate::strategies::{roll_strategy, DecisionMode, RollContext, StrategyParams};
use crate::training::{train, train_with_checkpoints, TrainConfig};
use crate::EngineError;

/// Default number of paths simulated and rolled at a time.
pub const DEFAULT_CHUNK_PATHS: usize = 1 << 17;

/// Single-pass running moments (count, mean, sum of squared deviations).
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Folds another accumulator in, as if its samples were pushed after ours.
    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let total = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / total as f64;
        self.m2 += other.m2 + delta * delta * (self.count as f64 * other.count as f64) / total as f64;
        self.count = total;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (zero below two samples).
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// A Monte-Carlo price with its sampling uncertainty.
#[derive(Debug, Clone, Copy)]
pub struct PriceEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// 95% confidence interval, `mean ± 1.96·std_error`.
    pub ci95: (f64, f64),
    pub sample_count: usize,
    pub mode: DecisionMode,
}

impl PriceEstimate {
    fn from_moments(m: &Moments, mode: DecisionMode) -> Self {
        let mean = m.mean();
        let se = m.std_error();
        PriceEstimate {
            mean,
            std_error: se,
            ci95: (mean - 1.96 * se, mean + 1.96 * se),
            sample_count: m.count() as usize,
            mode,
        }
    }
}

/// Sensitivity of the price to each date's initial forward.
#[derive(Debug, Clone)]
pub struct DeltaCurve {
    /// Purchase dates, year fractions.
    pub times: Vec<f64>,
    pub deltas: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub sample_count: usize,
    pub mode: DecisionMode,
}

fn check_eval_inputs(
    terms: &ContractTerms,
    model: &dyn PathSource,
    params: &StrategyParams,
    n_paths: usize,
) -> Result<(), EngineError> {
    if n_paths == 0 {
        return Err(EngineError::Config("evaluation needs at least one path".into()));
    }
    crate::training::check_model(terms, model)?;
    params.check_compatible(terms, model.state_dim())
}

/// Estimates the expected reward of `params` on fresh evaluation paths.
///
/// The evaluation stream is keyed by `seed` in its own domain, so it never
/// overlaps the training batches of the same seed.
pub fn price(
    terms: &ContractTerms,
    model: &dyn PathSource,
    params: &StrategyParams,
    n_paths: usize,
    mode: DecisionMode,
    seed: u64,
) -> Result<PriceEstimate, EngineError> {
    price_with_chunk(terms, model, params, n_paths, mode, seed, DEFAULT_CHUNK_PATHS)
}

/// [`price`] with an explicit streaming window size.
pub fn price_with_chunk(
    terms: &ContractTerms,
    model: &dyn PathSource,
    params: &StrategyParams,
    n_paths: usize,
    mode: DecisionMode,
    seed: u64,
    chunk_paths: usize,
) -> Result<PriceEstimate, EngineError> {
    check_eval_inputs(terms, model, params, n_paths.min(chunk_paths))?;
    let corridor = build_corridor(terms)?;
    let ctx = RollContext::new(terms, &corridor)?;
    let stream = StreamKey::new(seed, DOMAIN_EVAL, 0, 0);

    let mut total = Moments::default();
    let mut first = 0usize;
    while first < n_paths {
        let count = chunk_paths.min(n_paths - first);
        let batch = simulate_batch_range(model, first as u64, count, stream)?;
        let roll = roll_strategy(&ctx, params, &batch, mode)?;
        let mut chunk = Moments::default();
        for r in &roll.rewards {
            chunk.push(*r);
        }
        total.merge(&chunk);
        first += count;
    }
    Ok(PriceEstimate::from_moments(&total, mode))
}

/// Per-date forward deltas of the strategy, `delta_k = E[q_k · S_k] / F_k`.
///
/// The identity holds for the factor models, whose spot at a date is its own
/// initial forward times a unit-mean exponential; models without that
/// structure are rejected.
pub fn delta_forward(
    terms: &ContractTerms,
    model: &dyn PathSource,
    params: &StrategyParams,
    n_paths: usize,
    mode: DecisionMode,
    seed: u64,
) -> Result<DeltaCurve, EngineError> {
    delta_forward_with_chunk(terms, model, params, n_paths, mode, seed, DEFAULT_CHUNK_PATHS)
}

/// [`delta_forward`] with an explicit streaming window size.
pub fn delta_forward_with_chunk(
    terms: &ContractTerms,
    model: &dyn PathSource,
    params: &StrategyParams,
    n_paths: usize,
    mode: DecisionMode,
    seed: u64,
    chunk_paths: usize,
) -> Result<DeltaCurve, EngineError> {
    if !model.supports_forward_delta() {
        return Err(EngineError::Config(
            "this model does not support per-date forward deltas".into(),
        ));
    }
    let forwards = model
        .date_forwards()
        .ok_or_else(|| EngineError::Config("model exposes no initial forwards".into()))?
        .to_vec();
    check_eval_inputs(terms, model, params, n_paths.min(chunk_paths))?;
    let corridor = build_corridor(terms)?;
    let ctx = RollContext::new(terms, &corridor)?;
    let stream = StreamKey::new(seed, DOMAIN_EVAL, 0, 0);

    let n = terms.n;
    let mut totals = vec![Moments::default(); n];
    let mut first = 0usize;
    while first < n_paths {
        let count = chunk_paths.min(n_paths - first);
        let batch = simulate_batch_range(model, first as u64, count, stream)?;
        let roll = roll_strategy(&ctx, params, &batch, mode)?;
        for m in 0..count {
            let spots = batch.spots_of(m);
            let volumes = roll.volumes_of(m);
            for k in 0..n {
                totals[k].push(volumes[k] * spots[k] / forwards[k]);
            }
        }
        first += count;
    }
    Ok(DeltaCurve {
        times: terms.exercise_times.clone(),
        deltas: totals.iter().map(Moments::mean).collect(),
        std_errors: totals.iter().map(Moments::std_error).collect(),
        sample_count: n_paths,
        mode,
    })
}

/// One `(n, U_n)` sample of the convergence study, with its regression
/// coordinates.
#[derive(Debug, Clone, Copy)]
pub struct ConvergencePoint {
    /// Smaller iteration count of the doubling pair.
    pub n: usize,
    pub log_n: f64,
    pub log_abs_diff: f64,
}

/// Result of the iteration-convergence study.
#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    /// Fitted convergence order: `|U_2n − U_n| ~ C / n^alpha`.
    pub alpha: f64,
    pub points: Vec<ConvergencePoint>,
    /// `(iterations, U)` for every checkpoint evaluated.
    pub values: Vec<(usize, f64)>,
    /// Doubling pairs discarded because their difference was exactly zero.
    pub dropped: usize,
}

/// Least-squares estimate of the convergence order from `(n, U_n)` samples.
///
/// Every pair `(n, 2n)` present in `values` contributes the point
/// `(log n, log |U_2n − U_n|)`; the returned `alpha` is minus the slope,
/// so `alpha = 1` means first-order convergence. Pairs with an exactly zero
/// difference carry no information on a log scale and are dropped.
pub fn convergence_alpha(
    values: &[(usize, f64)],
) -> Result<(f64, Vec<ConvergencePoint>, usize), EngineError> {
    let mut points = Vec::new();
    let mut dropped = 0usize;
    for &(n, u_n) in values {
        let Some(&(_, u_2n)) = values.iter().find(|(m, _)| *m == 2 * n) else { continue };
        let diff = (u_2n - u_n).abs();
        if diff == 0.0 {
            dropped += 1;
            eprintln!("warning: U_{} equals U_{} exactly; dropping the pair from the regression", 2 * n, n);
            continue;
        }
        points.push(ConvergencePoint {
            n,
            log_n: (n as f64).ln(),
            log_abs_diff: diff.ln(),
        });
    }
    if points.len() < 2 {
        return Err(EngineError::Config(
            "the convergence regression needs at least two doubling pairs with non-zero differences"
                .into(),
        ));
    }
    let k = points.len() as f64;
    let mean_x = points.iter().map(|p| p.log_n).sum::<f64>() / k;
    let mean_y = points.iter().map(|p| p.log_abs_diff).sum::<f64>() / k;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for p in &points {
        sxx += (p.log_n - mean_x).powi(2);
        sxy += (p.log_n - mean_x) * (p.log_abs_diff - mean_y);
    }
    if sxx == 0.0 {
        return Err(EngineError::Config("the convergence grid has no spread in n".into()));
    }
    Ok((-(sxy / sxx), points, dropped))
}

/// Trains once, snapshotting the parameters on a doubling grid of iteration
/// counts, evaluates every snapshot on one common batch of `eval_paths`
/// paths, and regresses the doubling differences for the convergence order.
///
/// Evaluating all snapshots on the same paths removes the common sampling
/// noise from the differences, which would otherwise drown the trend.
pub fn convergence_study(
    terms: &ContractTerms,
    model: &dyn PathSource,
    initial: StrategyParams,
    config: &TrainConfig,
    n_grid: &[usize],
    eval_paths: usize,
) -> Result<ConvergenceStudy, EngineError> {
    if n_grid.is_empty() {
        return Err(EngineError::Config("the convergence study needs a checkpoint grid".into()));
    }
    if eval_paths == 0 {
        return Err(EngineError::Config("the convergence study needs evaluation paths".into()));
    }
    let mut grid: Vec<usize> = n_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();

    let (_, _, snapshots) = train_with_checkpoints(terms, model, initial, config, &grid)?;
    let corridor = build_corridor(terms)?;
    let ctx = RollContext::new(terms, &corridor)?;
    let batch = simulate_batch(
        model,
        eval_paths,
        StreamKey::new(config.seed, DOMAIN_CHECKPOINT_EVAL, 0, 0),
    )?;
    let mut values = Vec::with_capacity(grid.len());
    for (n, params) in grid.iter().zip(&snapshots) {
        let roll = roll_strategy(&ctx, params, &batch, DecisionMode::Smooth)?;
        let u = roll.rewards.iter().sum::<f64>() / roll.n_paths as f64;
        values.push((*n, u));
    }
    let (alpha, points, dropped) = convergence_alpha(&values)?;
    Ok(ConvergenceStudy { alpha, points, values, dropped })
}

/// Price spread at one evaluation size.
#[derive(Debug, Clone)]
pub struct VarianceLevel {
    pub n_paths: usize,
    /// One price per replication, in replication order.
    pub prices: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across replications.
    pub std: f64,
}

/// Repeats the full train-then-evaluate pipeline `replications` times
/// (replication `r` offsets the seed by `r`) and evaluates every trained
/// strategy at every requested evaluation size.
///
/// The spread of prices within a level mixes training variability with
/// evaluation noise; across levels the evaluation part shrinks like
/// `1/sqrt(n_paths)`.
pub fn variance_study(
    terms: &ContractTerms,
    model: &dyn PathSource,
    initial: &StrategyParams,
    config: &TrainConfig,
    replications: usize,
    eval_grid: &[usize],
    mode: DecisionMode,
) -> Result<Vec<VarianceLevel>, EngineError> {
    if replications < 2 {
        return Err(EngineError::Config("the variance study needs at least two replications".into()));
    }
    if eval_grid.is_empty() || eval_grid.contains(&0) {
        return Err(EngineError::Config("every evaluation size must be at least one path".into()));
    }
    let mut prices = vec![Vec::with_capacity(replications); eval_grid.len()];
    for r in 0..replications {
        let mut cfg = config.clone();
        cfg.seed = config.seed + r as u64;
        let (trained, _) = train(terms, model, initial.clone(), &cfg)?;
        for (level, &n_paths) in eval_grid.iter().enumerate() {
            let estimate = price(terms, model, &trained, n_paths, mode, cfg.seed)?;
            prices[level].push(estimate.mean);
        }
    }
    Ok(eval_grid
        .iter()
        .zip(prices)
        .map(|(&n_paths, prices)| {
            let mut m = Moments::default();
            for p in &prices {
                m.push(*p);
            }
            let (mean, std) = (m.mean(), m.variance().sqrt());
            VarianceLevel { n_paths, prices, mean, std }
        })
        .collect())
}
