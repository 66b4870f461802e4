//! The optimization loop, and transfer learning between related contracts.
//!
//! Training runs in the online regime: every iteration draws fresh,
//! independent batches of simulated paths (there is no fixed training set),
//! computes the smooth-mode loss gradient by reverse-mode differentiation and
//! applies one optimizer step per batch. Batch streams are keyed by
//! `(seed, iteration, batch)`, so a single iteration can be replayed bitwise
//! from its indices when a numeric failure is reported.
//!
//! Transfer learning covers two shortcuts: pretraining on an aggregated
//! contract (fewer dates, summed local bounds) whose parameters seed the
//! daily problem, and warm-starting from parameters saved before a market
//! move.

use crate::contract::{build_corridor, ContractTerms};
use crate::models::{simulate_batch, PathSource, StreamKey, DOMAIN_OPT, DOMAIN_TRAIN};
use crate::optimizers::OptimizerConfig;
use crate::strategies::grad::batch_gradient;
use crate::strategies::{RollContext, StrategyParams};
use crate::EngineError;
use serde::{Deserialize, Serialize};
use std::time::Instant;

fn default_iterations() -> usize {
    1000
}
fn default_batch_size() -> usize {
    1 << 14
}
fn default_batches_per_iter() -> usize {
    1
}
fn default_optimizer() -> OptimizerConfig {
    serde_json::from_str(r#"{"name":"psgld"}"#).expect("default optimizer config parses")
}

/// Knobs of one training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Fresh batches (and optimizer steps) per iteration.
    #[serde(default = "default_batches_per_iter")]
    pub batches_per_iter: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("the training defaults are valid")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.iterations == 0 {
            return Err(EngineError::Config("training needs at least one iteration".into()));
        }
        if self.batch_size == 0 || self.batches_per_iter == 0 {
            return Err(EngineError::Config(
                "batch size and batches per iteration must be at least 1".into(),
            ));
        }
        self.optimizer.validate()
    }
}

/// One row of the training trace.
#[derive(Debug, Clone)]
pub struct IterRecord {
    /// 1-based iteration number.
    pub iteration: usize,
    /// In-sample mean reward of the iteration's batches, measured before
    /// their optimizer steps.
    pub reward: f64,
    pub wall_ms: f64,
}

/// Trace and timing of a finished run.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub trace: Vec<IterRecord>,
    pub wall_ms: f64,
}

fn at_iteration(err: EngineError, iteration: usize, seed: u64) -> EngineError {
    match err {
        EngineError::Numeric { message, .. } => EngineError::Numeric {
            message,
            iteration: Some(iteration),
            seed: Some(seed),
        },
        other => other,
    }
}

/// Trains `initial` on fresh batches; returns the final parameters and trace.
pub fn train(
    terms: &ContractTerms,
    model: &dyn PathSource,
    initial: StrategyParams,
    config: &TrainConfig,
) -> Result<(StrategyParams, TrainReport), EngineError> {
    let (params, report, _) = train_with_checkpoints(terms, model, initial, config, &[])?;
    Ok((params, report))
}

/// [`train`], additionally snapshotting the parameters after each iteration
/// count listed in `checkpoint_after` (0 snapshots the initial parameters).
/// Snapshots are returned in ascending iteration order.
pub fn train_with_checkpoints(
    terms: &ContractTerms,
    model: &dyn PathSource,
    initial: StrategyParams,
    config: &TrainConfig,
    checkpoint_after: &[usize],
) -> Result<(StrategyParams, TrainReport, Vec<StrategyParams>), EngineError> {
    config.validate()?;
    check_model(terms, model)?;
    initial.check_compatible(terms, model.state_dim())?;

    let mut marks: Vec<usize> = checkpoint_after.to_vec();
    marks.sort_unstable();
    marks.dedup();
    if let Some(last) = marks.last() {
        if *last > config.iterations {
            return Err(EngineError::Config(format!(
                "checkpoint after iteration {last} exceeds the run length {}",
                config.iterations
            )));
        }
    }

    let corridor = build_corridor(terms)?;
    let ctx = RollContext::new(terms, &corridor)?;
    let mut params = initial;
    let mut optimizer = config
        .optimizer
        .build(params.n_params(), StreamKey::new(config.seed, DOMAIN_OPT, 0, 0))?;

    let mut checkpoints = Vec::with_capacity(marks.len());
    let mut next_mark = marks.iter().copied().peekable();
    if next_mark.peek() == Some(&0) {
        checkpoints.push(params.clone());
        next_mark.next();
    }

    let started = Instant::now();
    let mut trace = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let iter_started = Instant::now();
        let mut reward_sum = 0.0;
        for batch_idx in 0..config.batches_per_iter {
            let stream = StreamKey::new(config.seed, DOMAIN_TRAIN, iter as u64, batch_idx as u64);
            let batch = simulate_batch(model, config.batch_size, stream)
                .map_err(|e| at_iteration(e, iter + 1, config.seed))?;
            let grad = batch_gradient(&ctx, &params, &batch)
                .map_err(|e| at_iteration(e, iter + 1, config.seed))?;
            optimizer
                .step(params.values_mut(), &grad.grad)
                .map_err(|e| at_iteration(e, iter + 1, config.seed))?;
            reward_sum += grad.mean_reward;
        }
        trace.push(IterRecord {
            iteration: iter + 1,
            reward: reward_sum / config.batches_per_iter as f64,
            wall_ms: iter_started.elapsed().as_secs_f64() * 1e3,
        });
        if next_mark.peek() == Some(&(iter + 1)) {
            checkpoints.push(params.clone());
            next_mark.next();
        }
    }

    let report = TrainReport { trace, wall_ms: started.elapsed().as_secs_f64() * 1e3 };
    Ok((params, report, checkpoints))
}

pub(crate) fn check_model(terms: &ContractTerms, model: &dyn PathSource) -> Result<(), EngineError> {
    if model.n_dates() != terms.n {
        return Err(EngineError::Config(format!(
            "model simulates {} dates but the contract has {}",
            model.n_dates(),
            terms.n
        )));
    }
    if model.times() != terms.exercise_times.as_slice() {
        return Err(EngineError::Config(
            "model time grid differs from the contract's purchase dates".into(),
        ));
    }
    Ok(())
}

/// Contiguous partition of the purchase dates into buckets (for example,
/// days into calendar months).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketMap {
    lens: Vec<usize>,
    starts: Vec<usize>,
}

impl BucketMap {
    pub fn new(lens: Vec<usize>) -> Result<Self, EngineError> {
        if lens.is_empty() || lens.contains(&0) {
            return Err(EngineError::Config("every bucket needs at least one date".into()));
        }
        let mut starts = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for len in &lens {
            starts.push(acc);
            acc += len;
        }
        Ok(BucketMap { lens, starts })
    }

    pub fn n_buckets(&self) -> usize {
        self.lens.len()
    }

    /// Total number of dates covered.
    pub fn n_dates(&self) -> usize {
        self.starts.last().unwrap() + self.lens.last().unwrap()
    }

    /// First date of bucket `b`.
    pub fn start(&self, b: usize) -> usize {
        self.starts[b]
    }

    pub fn len(&self, b: usize) -> usize {
        self.lens[b]
    }

    /// Calendar midpoint of bucket `b`, rounded down.
    pub fn middle_date(&self, b: usize) -> usize {
        self.starts[b] + (self.lens[b] - 1) / 2
    }

    /// Bucket containing `date`.
    pub fn bucket_of(&self, date: usize) -> usize {
        match self.starts.binary_search(&date) {
            Ok(b) => b,
            Err(next) => next - 1,
        }
    }
}

/// Coarser contract with one purchase date per bucket, placed at the bucket's
/// middle date, and local bounds summed over bucket members. The global
/// bounds, strike and maturity carry over unchanged.
pub fn aggregate_contract(
    terms: &ContractTerms,
    map: &BucketMap,
) -> Result<ContractTerms, EngineError> {
    if map.n_dates() != terms.n {
        return Err(EngineError::Config(format!(
            "bucket map covers {} dates but the contract has {}",
            map.n_dates(),
            terms.n
        )));
    }
    let mut times = Vec::with_capacity(map.n_buckets());
    let mut q_min = Vec::with_capacity(map.n_buckets());
    let mut q_max = Vec::with_capacity(map.n_buckets());
    for b in 0..map.n_buckets() {
        times.push(terms.exercise_times[map.middle_date(b)]);
        let members = map.start(b)..map.start(b) + map.len(b);
        q_min.push(terms.q_min[members.clone()].iter().sum());
        q_max.push(terms.q_max[members].iter().sum());
    }
    ContractTerms::with_local_bounds(
        times,
        terms.maturity,
        q_min,
        q_max,
        terms.global_min,
        terms.global_max,
        terms.strike,
    )
}

/// Maps parameters trained on the aggregated contract onto the full date
/// grid: each date of the affine rule copies its bucket's coefficient row;
/// network parameters transfer unchanged (the architecture never depends on
/// the date count).
pub fn transfer_params(
    agg_params: &StrategyParams,
    map: &BucketMap,
    target_terms: &ContractTerms,
) -> Result<StrategyParams, EngineError> {
    if map.n_dates() != target_terms.n {
        return Err(EngineError::Config(format!(
            "bucket map covers {} dates but the target contract has {}",
            map.n_dates(),
            target_terms.n
        )));
    }
    match agg_params {
        StrategyParams::PayoffVolume(p) => {
            if p.n_dates != map.n_buckets() {
                return Err(EngineError::Config(format!(
                    "aggregated rule has {} rows but the bucket map has {} buckets",
                    p.n_dates,
                    map.n_buckets()
                )));
            }
            let mut target = StrategyParams::payoff_volume(target_terms.n);
            let values = target.values_mut();
            for date in 0..target_terms.n {
                let row = p.row(map.bucket_of(date));
                values[3 * date..3 * date + 3].copy_from_slice(row);
            }
            Ok(target)
        }
        StrategyParams::Network(_) => Ok(agg_params.clone()),
    }
}

/// Continues training from saved parameters under possibly changed terms or
/// model. With zero iterations the parameters are passed through untouched
/// (pure reuse); otherwise this is a plain [`train`] from the saved point.
pub fn warm_start(
    saved: StrategyParams,
    terms: &ContractTerms,
    model: &dyn PathSource,
    config: &TrainConfig,
) -> Result<(StrategyParams, TrainReport), EngineError> {
    check_model(terms, model)?;
    saved.check_compatible(terms, model.state_dim())?;
    if config.iterations == 0 {
        return Ok((saved, TrainReport::default()));
    }
    train(terms, model, saved, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{OneFactorModel, DOMAIN_EVAL};
    use crate::strategies::{roll_strategy, DecisionMode};

    fn case1_terms() -> ContractTerms {
        ContractTerms::with_uniform_dates(31, 31.0 / 365.0, 0.0, 6.0, 140.0, 200.0, 20.0).unwrap()
    }

    fn sgd_config(iterations: usize, batch_size: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size,
            batches_per_iter: 1,
            optimizer: serde_json::from_str(r#"{"name":"sgd","learning_rate":0.01}"#).unwrap(),
            seed,
        }
    }

    #[test]
    fn train_replays_the_manual_loop_bitwise() {
        let terms = case1_terms();
        let model = OneFactorModel::flat(4.0, 0.7, 20.0, &terms.exercise_times).unwrap();
        let config = sgd_config(2, 256, 42);
        let (trained, report) =
            train(&terms, &model, StrategyParams::payoff_volume(31), &config).unwrap();

        let corridor = build_corridor(&terms).unwrap();
        let ctx = RollContext::new(&terms, &corridor).unwrap();
        let mut params = StrategyParams::payoff_volume(31);
        let mut rewards = Vec::new();
        for iter in 0..2u64 {
            let batch =
                simulate_batch(&model, 256, StreamKey::new(42, DOMAIN_TRAIN, iter, 0)).unwrap();
            let grad = batch_gradient(&ctx, &params, &batch).unwrap();
            crate::optimizers::sgd_step(params.values_mut(), &grad.grad, 0.01).unwrap();
            rewards.push(grad.mean_reward);
        }
        assert_eq!(trained.values(), params.values());
        assert_eq!(report.trace.len(), 2);
        for (rec, expect) in report.trace.iter().zip(&rewards) {
            assert_eq!(rec.reward.to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn iterations_draw_fresh_batches() {
        let terms = case1_terms();
        let model = OneFactorModel::flat(4.0, 0.7, 20.0, &terms.exercise_times).unwrap();
        let a = simulate_batch(&model, 16, StreamKey::new(9, DOMAIN_TRAIN, 0, 0)).unwrap();
        let b = simulate_batch(&model, 16, StreamKey::new(9, DOMAIN_TRAIN, 1, 0)).unwrap();
        let c = simulate_batch(&model, 16, StreamKey::new(9, DOMAIN_TRAIN, 0, 1)).unwrap();
        assert_ne!(a.spots, b.spots);
        assert_ne!(a.spots, c.spots);
        assert_ne!(b.spots, c.spots);
    }

    #[test]
    fn a_few_iterations_improve_the_in_sample_reward() {
        let terms = case1_terms();
        let model = OneFactorModel::flat(4.0, 0.7, 20.0, &terms.exercise_times).unwrap();
        let config = TrainConfig {
            iterations: 40,
            batch_size: 1024,
            batches_per_iter: 1,
            optimizer: serde_json::from_str(r#"{"name":"adam","learning_rate":0.1}"#).unwrap(),
            seed: 7,
        };
        let (trained, report) =
            train(&terms, &model, StrategyParams::payoff_volume(31), &config).unwrap();

        let corridor = build_corridor(&terms).unwrap();
        let ctx = RollContext::new(&terms, &corridor).unwrap();
        let eval = simulate_batch(&model, 4096, StreamKey::new(100, DOMAIN_EVAL, 0, 0)).unwrap();
        let before = roll_strategy(&ctx, &StrategyParams::payoff_volume(31), &eval, DecisionMode::Smooth)
            .unwrap()
            .rewards
            .iter()
            .sum::<f64>();
        let after = roll_strategy(&ctx, &trained, &eval, DecisionMode::Smooth)
            .unwrap()
            .rewards
            .iter()
            .sum::<f64>();
        assert!(
            after > before,
            "training should improve the out-of-sample reward ({after} vs {before})"
        );
        assert_eq!(report.trace.len(), 40);
        assert!(report.trace.iter().all(|r| r.reward.is_finite()));
    }

    #[test]
    fn forced_contract_training_cannot_change_the_strategy() {
        let terms = ContractTerms::with_uniform_dates(4, 1.0, 0.0, 2.0, 8.0, 8.0, 20.0).unwrap();
        let model = OneFactorModel::flat(4.0, 0.7, 20.0, &terms.exercise_times).unwrap();
        let initial = StrategyParams::payoff_volume(4);
        let (trained, _) = train(&terms, &model, initial.clone(), &sgd_config(5, 64, 3)).unwrap();
        // Zero gradient on every date: parameters cannot move.
        assert_eq!(trained.values(), initial.values());
    }

    #[test]
    fn checkpoints_capture_the_parameter_history() {
        let terms = case1_terms();
        let model = OneFactorModel::flat(4.0, 0.7, 20.0, &terms.exercise_times).unwrap();
        let initial = StrategyParams::payoff_volume(31);
        let config = sgd_config(4, 128, 5);
        let (final_params, _, checks) =
            train_with_checkpoints(&terms, &model, initial.clone(), &config, &[4, 0, 2]).unwrap();
        assert_eq!(checks.len(), 3);
        assert_eq!(checks[0].values(), initial.values());
        assert_eq!(checks[2].values(), final_params.values());
        // The after-2 snapshot equals a fresh 2-iteration run.
        let (two_iter, _) = train(&terms, &model, initial, &sgd_config(2, 128, 5)).unwrap();
        assert_eq!(checks[1].values(), two_iter.values());

        let err = train_with_checkpoints(
            &terms,
            &model,
            StrategyParams::payoff_volume(31),
            &config,
            &[9],
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::Config(_)));
    }

    #[test]
    fn aggregation_sums_bounds_and_keeps_globals() {
        let month_lens =
            [31usize, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
        let terms =
            ContractTerms::with_uniform_dates(365, 1.0, 0.0, 6.0, 1300.0, 1900.0, 20.0).unwrap();
        let map = BucketMap::new(month_lens.to_vec()).unwrap();
        let agg = aggregate_contract(&terms, &map).unwrap();
        assert_eq!(agg.n, 12);
        assert_eq!(agg.q_max[0], 186.0);
        assert_eq!(agg.q_max[1], 168.0);
        assert_eq!(agg.q_max[3], 180.0);
        assert_eq!(agg.q_min, vec![0.0; 12]);
        assert_eq!(agg.global_min, 1300.0);
        assert_eq!(agg.global_max, 1900.0);
        assert_eq!(agg.strike, 20.0);
        assert_eq!(agg.maturity, 1.0);
        // January's date sits on day 15 (0-based), the calendar midpoint.
        assert_eq!(agg.exercise_times[0], terms.exercise_times[15]);
        assert_eq!(agg.exercise_times[1], terms.exercise_times[31 + 13]);

        // The identity partition changes nothing.
        let identity = BucketMap::new(vec![1; 365]).unwrap();
        let same = aggregate_contract(&terms, &identity).unwrap();
        assert_eq!(same, terms);
    }

    #[test]
    fn transfer_copies_bucket_rows_onto_member_dates() {
        let map = BucketMap::new(vec![3, 2, 4]).unwrap();
        let target =
            ContractTerms::with_uniform_dates(9, 1.0, 0.0, 1.0, 0.0, 9.0, 20.0).unwrap();
        let mut agg = StrategyParams::payoff_volume(3);
        for b in 0..3 {
            let v = b as f64;
            agg.values_mut()[3 * b..3 * b + 3].copy_from_slice(&[v, -v, 0.5 * v]);
        }
        let daily = transfer_params(&agg, &map, &target).unwrap();
        if let StrategyParams::PayoffVolume(p) = &daily {
            assert_eq!(p.row(0), &[0.0, 0.0, 0.0]);
            assert_eq!(p.row(2), &[0.0, 0.0, 0.0]);
            assert_eq!(p.row(3), &[1.0, -1.0, 0.5]);
            assert_eq!(p.row(4), &[1.0, -1.0, 0.5]);
            assert_eq!(p.row(5), &[2.0, -2.0, 1.0]);
            assert_eq!(p.row(8), &[2.0, -2.0, 1.0]);
        } else {
            panic!("expected the affine rule");
        }

        let nn = StrategyParams::network(&[8], 1, 3).unwrap();
        let moved = transfer_params(&nn, &map, &target).unwrap();
        assert_eq!(moved, nn);

        let wrong = StrategyParams::payoff_volume(4);
        assert!(transfer_params(&wrong, &map, &target).is_err());
    }

    #[test]
    fn warm_start_with_zero_iterations_is_identity() {
        let terms = case1_terms();
        let model = OneFactorModel::flat(4.0, 0.7, 20.0, &terms.exercise_times).unwrap();
        let saved = StrategyParams::payoff_volume(31);
        let config = TrainConfig { iterations: 0, ..sgd_config(1, 64, 1) };
        let (params, report) = warm_start(saved.clone(), &terms, &model, &config).unwrap();
        assert_eq!(params.values(), saved.values());
        assert!(report.trace.is_empty());

        // Incompatible saved parameters are rejected up front.
        let wrong = StrategyParams::payoff_volume(12);
        assert!(warm_start(wrong, &terms, &model, &config).is_err());
    }

    #[test]
    fn numeric_failures_report_iteration_and_seed() {
        let terms = case1_terms();
        let model = OneFactorModel::flat(4.0, 0.7, 20.0, &terms.exercise_times).unwrap();
        let mut bad = StrategyParams::payoff_volume(31);
        // Payoff coefficients at the float ceiling overflow the very first
        // score multiplication.
        for v in bad.values_mut() {
            *v = 1e308;
        }
        match train(&terms, &model, bad, &sgd_config(3, 64, 123)) {
            Err(EngineError::Numeric { iteration, seed, .. }) => {
                assert_eq!(iteration, Some(1));
                assert_eq!(seed, Some(123));
            }
            other => panic!("expected a numeric error, got {other:?}"),
        }
    }

    #[test]
    fn trained_parameters_stay_feasible_on_validation_paths() {
        let terms = case1_terms();
        let model = OneFactorModel::flat(4.0, 0.7, 20.0, &terms.exercise_times).unwrap();
        let (trained, _) =
            train(&terms, &model, StrategyParams::payoff_volume(31), &sgd_config(10, 512, 8))
                .unwrap();
        let corridor = build_corridor(&terms).unwrap();
        let ctx = RollContext::new(&terms, &corridor).unwrap();
        let batch = simulate_batch(&model, 10_000, StreamKey::new(500, DOMAIN_EVAL, 0, 0)).unwrap();
        for mode in [DecisionMode::Smooth, DecisionMode::BangBang] {
            let roll = roll_strategy(&ctx, &trained, &batch, mode).unwrap();
            for m in 0..batch.n_paths {
                let total: f64 = roll.volumes_of(m).iter().sum();
                assert!(total >= 140.0 - 1e-9 && total <= 200.0 + 1e-9);
            }
        }
    }
}
