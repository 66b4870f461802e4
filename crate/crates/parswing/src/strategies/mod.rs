//! Parametric purchase strategies.
//!
//! A strategy maps the observable state on purchase date `k` — spot payoff,
//! fraction of the global volume already bought, optionally the model
//! factors — to a score `chi`. The purchased volume interpolates the
//! admissible range: `q = a_minus + (a_plus - a_minus) * sigma(chi)` with the
//! logistic `sigma` while training (smooth mode) and the step function
//! `chi >= 0` when valuing the trained strategy (bang-bang mode). Because the
//! admissible range is built from the volume corridor, any score yields a
//! feasible purchase plan.
//!
//! Two families are provided: an explicit per-date affine rule in the payoff
//! and volume ratio, and a date-independent feed-forward network that outputs
//! the three affine coefficients.

pub mod grad;

use crate::contract::{admissible_interval, ContractTerms, VolumeCorridor};
use crate::models::{PathBatch, StreamKey, DOMAIN_INIT};
use crate::EngineError;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How a score is turned into a purchase inside the admissible range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    /// Logistic interpolation; differentiable, used during training.
    Smooth,
    /// Hard threshold `chi >= 0`; used to value the trained strategy.
    BangBang,
}

/// Fraction of the global volume range already purchased.
///
/// `(q - global_min) / (global_max - global_min)`, degenerating to
/// `(q - global_min) / global_min` when the global bounds coincide.
pub fn eta(terms: &ContractTerms, q_cum: f64) -> Result<f64, EngineError> {
    let (scale, shift) = eta_transform(terms)?;
    Ok(q_cum * scale + shift)
}

fn eta_transform(terms: &ContractTerms) -> Result<(f64, f64), EngineError> {
    if terms.global_max > terms.global_min {
        let scale = 1.0 / (terms.global_max - terms.global_min);
        Ok((scale, -terms.global_min * scale))
    } else if terms.global_min > 0.0 {
        let scale = 1.0 / terms.global_min;
        Ok((scale, -1.0))
    } else {
        Err(EngineError::Config(
            "volume-ratio input is undefined when both global bounds are zero".into(),
        ))
    }
}

/// Precomputed per-contract quantities shared by every rollout.
#[derive(Debug, Clone)]
pub struct RollContext<'a> {
    pub terms: &'a ContractTerms,
    pub corridor: &'a VolumeCorridor,
    /// Purchase dates rescaled to `[0, 1)` by the maturity (network input).
    pub times_norm: Vec<f64>,
    pub eta_scale: f64,
    pub eta_shift: f64,
}

impl<'a> RollContext<'a> {
    pub fn new(terms: &'a ContractTerms, corridor: &'a VolumeCorridor) -> Result<Self, EngineError> {
        let (eta_scale, eta_shift) = eta_transform(terms)?;
        let times_norm = terms.exercise_times.iter().map(|t| t / terms.maturity).collect();
        Ok(RollContext { terms, corridor, times_norm, eta_scale, eta_shift })
    }
}

/// Per-date affine rule: `chi_k = a_k * (S - K) + b_k * eta + c_k` with one
/// coefficient row per purchase date.
#[derive(Debug, Clone, PartialEq)]
pub struct PvParams {
    pub n_dates: usize,
    /// `n_dates x 3` coefficient rows `(a, b, c)`, row-major.
    pub values: Vec<f64>,
}

impl PvParams {
    /// Starting point: every row `(1, -1, 0)` — buy on payoff, ease off as
    /// the volume ratio fills up.
    pub fn payoff_following(n_dates: usize) -> Self {
        let mut values = Vec::with_capacity(3 * n_dates);
        for _ in 0..n_dates {
            values.extend_from_slice(&[1.0, -1.0, 0.0]);
        }
        PvParams { n_dates, values }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[3 * k..3 * k + 3]
    }
}

/// Feed-forward network with ReLU hidden layers and a linear 3-dimensional
/// output holding the affine coefficients `(a, b, c)` of the score.
///
/// Inputs per date: normalized time, payoff `S - K`, volume ratio `eta`, and
/// optionally the model state factors.
#[derive(Debug, Clone, PartialEq)]
pub struct NnParams {
    /// Layer widths, input first (e.g. `[3, 10, 10, 3]`).
    pub dims: Vec<usize>,
    /// All weights and biases, flat: `w0, b0, w1, b1, ...`, weights row-major.
    pub values: Vec<f64>,
    /// Byte offsets into `values`: `(weight_offset, bias_offset)` per layer.
    offsets: Vec<(usize, usize)>,
}

impl NnParams {
    /// Network with the given hidden widths and `state_dim` extra inputs.
    /// Weights are drawn uniformly in `±1/sqrt(fan_in)`; hidden biases
    /// start slightly positive so most rectified units fire on part of the
    /// data from the start. The output bias `(1, -1, 0)` makes the initial
    /// strategy match the payoff-following affine rule on average.
    pub fn init(hidden: &[usize], state_dim: usize, seed: u64) -> Result<Self, EngineError> {
        if hidden.is_empty() || hidden.iter().any(|w| *w == 0) {
            return Err(EngineError::Config("network needs at least one non-empty hidden layer".into()));
        }
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(3 + state_dim);
        dims.extend_from_slice(hidden);
        dims.push(3);
        let mut rng = StreamKey::new(seed, DOMAIN_INIT, 0, 0).rng();
        let mut values = Vec::new();
        let mut offsets = Vec::new();
        for layer in 1..dims.len() {
            let fan_in = dims[layer - 1];
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w_off = values.len();
            for _ in 0..dims[layer] * fan_in {
                values.push(rng.random_range(-bound..bound));
            }
            let b_off = values.len();
            if layer == dims.len() - 1 {
                values.extend_from_slice(&[1.0, -1.0, 0.0]);
            } else {
                values.extend(std::iter::repeat(0.01).take(dims[layer]));
            }
            offsets.push((w_off, b_off));
        }
        Ok(NnParams { dims, values, offsets })
    }

    fn from_parts(dims: Vec<usize>, values: Vec<f64>) -> Result<Self, EngineError> {
        if dims.len() < 3 || *dims.last().unwrap() != 3 {
            return Err(EngineError::Config("network must end in a 3-dimensional output layer".into()));
        }
        if dims[0] < 3 {
            return Err(EngineError::Config("network input must have at least 3 features".into()));
        }
        let mut offsets = Vec::new();
        let mut expect = 0;
        for layer in 1..dims.len() {
            offsets.push((expect, expect + dims[layer] * dims[layer - 1]));
            expect += dims[layer] * (dims[layer - 1] + 1);
        }
        if values.len() != expect {
            return Err(EngineError::Config(format!(
                "network parameter count {} does not match architecture (expected {expect})",
                values.len()
            )));
        }
        Ok(NnParams { dims, values, offsets })
    }

    /// Number of model-state inputs the network expects.
    pub fn state_dim(&self) -> usize {
        self.dims[0] - 3
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let (w, b) = self.offsets[layer];
        &self.values[w..b]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let (_, b) = self.offsets[layer];
        &self.values[b..b + self.dims[layer + 1]]
    }

    pub(crate) fn offsets(&self, layer: usize) -> (usize, usize) {
        self.offsets[layer]
    }

    /// Evaluates the three output coefficients for one date into `out`.
    fn coefficients(
        &self,
        t_norm: f64,
        payoff: f64,
        eta: f64,
        states: &[f64],
        scratch: &mut Scratch,
        out: &mut [f64; 3],
        mut kink: Option<&mut f64>,
    ) {
        let input = &mut scratch.input;
        input.clear();
        input.push(t_norm);
        input.push(payoff);
        input.push(eta);
        input.extend_from_slice(states);

        let mut cur: &mut Vec<f64> = &mut scratch.a;
        let mut next: &mut Vec<f64> = &mut scratch.b;
        cur.clear();
        cur.extend_from_slice(input);
        for layer in 0..self.n_layers() {
            let (n_out, n_in) = (self.dims[layer + 1], self.dims[layer]);
            let w = self.weights(layer);
            let b = self.biases(layer);
            next.clear();
            for i in 0..n_out {
                let mut z = b[i];
                let row = &w[i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    z += row[j] * cur[j];
                }
                if layer + 1 < self.n_layers() {
                    if let Some(k) = kink.as_deref_mut() {
                        *k = k.min(z.abs());
                    }
                    z = if z > 0.0 { z } else { 0.0 };
                }
                next.push(z);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        out.copy_from_slice(&cur[..3]);
    }
}

/// Reusable forward-pass buffers for network evaluation.
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    input: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Trainable strategy parameters, stored flat for the optimizers.
#[derive(Debug, Clone, PartialEq)]
pub enum StrategyParams {
    PayoffVolume(PvParams),
    Network(NnParams),
}

impl StrategyParams {
    pub fn payoff_volume(n_dates: usize) -> Self {
        StrategyParams::PayoffVolume(PvParams::payoff_following(n_dates))
    }

    pub fn network(hidden: &[usize], state_dim: usize, seed: u64) -> Result<Self, EngineError> {
        Ok(StrategyParams::Network(NnParams::init(hidden, state_dim, seed)?))
    }

    pub fn n_params(&self) -> usize {
        self.values().len()
    }

    pub fn values(&self) -> &[f64] {
        match self {
            StrategyParams::PayoffVolume(p) => &p.values,
            StrategyParams::Network(p) => &p.values,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match self {
            StrategyParams::PayoffVolume(p) => &mut p.values,
            StrategyParams::Network(p) => &mut p.values,
        }
    }

    /// Number of model-state values the strategy reads per date.
    pub fn state_inputs(&self) -> usize {
        match self {
            StrategyParams::PayoffVolume(_) => 0,
            StrategyParams::Network(p) => p.state_dim(),
        }
    }

    /// Checks the parameters can drive the given contract and path data.
    pub fn check_compatible(&self, terms: &ContractTerms, state_dim: usize) -> Result<(), EngineError> {
        match self {
            StrategyParams::PayoffVolume(p) => {
                if p.n_dates != terms.n {
                    return Err(EngineError::Config(format!(
                        "strategy has coefficient rows for {} dates but the contract has {}",
                        p.n_dates, terms.n
                    )));
                }
            }
            StrategyParams::Network(p) => {
                if p.state_dim() > state_dim {
                    return Err(EngineError::Config(format!(
                        "network expects {} state inputs but paths provide {state_dim}",
                        p.state_dim()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Score `chi` for date `k`. `states` must hold at least the strategy's
    /// state inputs for that date.
    pub fn score(
        &self,
        ctx: &RollContext,
        k: usize,
        payoff: f64,
        eta: f64,
        states: &[f64],
        scratch: &mut Scratch,
    ) -> f64 {
        self.score_impl(ctx, k, payoff, eta, states, scratch, None)
    }

    fn score_impl(
        &self,
        ctx: &RollContext,
        k: usize,
        payoff: f64,
        eta: f64,
        states: &[f64],
        scratch: &mut Scratch,
        kink: Option<&mut f64>,
    ) -> f64 {
        match self {
            StrategyParams::PayoffVolume(p) => {
                let row = p.row(k);
                row[0] * payoff + row[1] * eta + row[2]
            }
            StrategyParams::Network(p) => {
                let mut coef = [0.0; 3];
                p.coefficients(
                    ctx.times_norm[k],
                    payoff,
                    eta,
                    &states[..p.state_dim()],
                    scratch,
                    &mut coef,
                    kink,
                );
                coef[0] * payoff + coef[1] * eta + coef[2]
            }
        }
    }
}

/// Purchased volumes and rewards of a batch rollout.
#[derive(Debug, Clone)]
pub struct RollOutput {
    pub n_paths: usize,
    pub n_dates: usize,
    /// `n_paths x n_dates` purchased volumes, path-major.
    pub volumes: Vec<f64>,
    /// Total payoff `sum_k q_k (S_k - K)` per path.
    pub rewards: Vec<f64>,
}

impl RollOutput {
    pub fn volumes_of(&self, m: usize) -> &[f64] {
        &self.volumes[m * self.n_dates..(m + 1) * self.n_dates]
    }
}

/// Rolls the strategy over every path of a batch.
pub fn roll_strategy(
    ctx: &RollContext,
    params: &StrategyParams,
    batch: &PathBatch,
    mode: DecisionMode,
) -> Result<RollOutput, EngineError> {
    params.check_compatible(ctx.terms, batch.state_dim)?;
    if batch.n_dates != ctx.terms.n {
        return Err(EngineError::Config(format!(
            "batch has {} dates but the contract has {}",
            batch.n_dates, ctx.terms.n
        )));
    }
    let mut volumes = vec![0.0; batch.n_paths * batch.n_dates];
    let mut rewards = vec![0.0; batch.n_paths];
    let mut scratch = Scratch::default();
    for m in 0..batch.n_paths {
        let row = &mut volumes[m * batch.n_dates..(m + 1) * batch.n_dates];
        rewards[m] = roll_single(
            ctx,
            params,
            batch.spots_of(m),
            batch.states_of(m),
            batch.state_dim,
            mode,
            &mut scratch,
            Some(row),
            None,
        );
    }
    Ok(RollOutput { n_paths: batch.n_paths, n_dates: batch.n_dates, volumes, rewards })
}

/// Rolls one path; returns the total payoff. The expression order here is
/// mirrored exactly by the tape recording in [`grad`], so smooth-mode values
/// agree bitwise with the differentiated loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn roll_single(
    ctx: &RollContext,
    params: &StrategyParams,
    spots: &[f64],
    states: &[f64],
    state_dim: usize,
    mode: DecisionMode,
    scratch: &mut Scratch,
    mut volumes: Option<&mut [f64]>,
    mut kink: Option<&mut f64>,
) -> f64 {
    let terms = ctx.terms;
    let mut q_cum = 0.0;
    let mut reward = 0.0;
    for k in 0..terms.n {
        let payoff = spots[k] - terms.strike;
        let lo = (ctx.corridor.lower[k + 1]).max(q_cum + terms.q_min[k]);
        let hi = (ctx.corridor.upper[k + 1]).min(q_cum + terms.q_max[k]);
        let a_minus = lo - q_cum;
        let a_plus = hi - q_cum;
        // On the first date the cumulative volume is still parameter-free, so
        // a corridor tie there cannot kink the loss; only later dates count.
        if k > 0 {
            if let Some(kd) = kink.as_deref_mut() {
                *kd = kd
                    .min((ctx.corridor.lower[k + 1] - (q_cum + terms.q_min[k])).abs())
                    .min((ctx.corridor.upper[k + 1] - (q_cum + terms.q_max[k])).abs());
            }
        }
        let eta = q_cum * ctx.eta_scale + ctx.eta_shift;
        let state_row = &states[k * state_dim..(k + 1) * state_dim];
        let chi = params.score_impl(ctx, k, payoff, eta, state_row, scratch, kink.as_deref_mut());
        let frac = match mode {
            DecisionMode::Smooth => 1.0 / (1.0 + (-chi).exp()),
            DecisionMode::BangBang => {
                if chi >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        };
        let q = a_minus + (a_plus - a_minus) * frac;
        reward += q * payoff;
        q_cum += q;
        if let Some(v) = volumes.as_deref_mut() {
            v[k] = q;
        }
    }
    reward
}

/// Single purchase decision on date `k` given the state observed there.
/// Validates that `q_cum` is reachable before deciding.
pub fn purchase(
    ctx: &RollContext,
    params: &StrategyParams,
    k: usize,
    spot: f64,
    q_cum: f64,
    states: &[f64],
    mode: DecisionMode,
) -> Result<f64, EngineError> {
    let (a_minus, a_plus) = admissible_interval(ctx.terms, ctx.corridor, k, q_cum)?;
    let payoff = spot - ctx.terms.strike;
    let eta = q_cum * ctx.eta_scale + ctx.eta_shift;
    let mut scratch = Scratch::default();
    let chi = params.score(ctx, k, payoff, eta, states, &mut scratch);
    let frac = match mode {
        DecisionMode::Smooth => 1.0 / (1.0 + (-chi).exp()),
        DecisionMode::BangBang => {
            if chi >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
    };
    Ok(a_minus + (a_plus - a_minus) * frac)
}

/// Portable on-disk form: kind, contract size, tensor shapes and row-major
/// tensor values.
#[derive(Debug, Serialize, Deserialize)]
struct PortableParams {
    strategy_kind: String,
    contract_n: usize,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

impl StrategyParams {
    pub fn to_json(&self, contract_n: usize) -> String {
        let portable = match self {
            StrategyParams::PayoffVolume(p) => PortableParams {
                strategy_kind: "payoff_volume".into(),
                contract_n,
                shapes: vec![vec![p.n_dates, 3]],
                values: vec![p.values.clone()],
            },
            StrategyParams::Network(p) => {
                let mut shapes = Vec::new();
                let mut values = Vec::new();
                for layer in 0..p.n_layers() {
                    shapes.push(vec![p.dims[layer + 1], p.dims[layer]]);
                    values.push(p.weights(layer).to_vec());
                    shapes.push(vec![p.dims[layer + 1]]);
                    values.push(p.biases(layer).to_vec());
                }
                PortableParams { strategy_kind: "network".into(), contract_n, shapes, values }
            }
        };
        serde_json::to_string_pretty(&portable).expect("parameter serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<(Self, usize), EngineError> {
        let portable: PortableParams = serde_json::from_str(text)
            .map_err(|e| EngineError::Config(format!("cannot parse strategy parameters: {e}")))?;
        if portable.shapes.len() != portable.values.len() {
            return Err(EngineError::Config("parameter shapes and values differ in length".into()));
        }
        for (shape, vals) in portable.shapes.iter().zip(&portable.values) {
            let expect: usize = shape.iter().product();
            if expect != vals.len() {
                return Err(EngineError::Config(format!(
                    "tensor of shape {shape:?} has {} values",
                    vals.len()
                )));
            }
        }
        match portable.strategy_kind.as_str() {
            "payoff_volume" => {
                if portable.shapes.len() != 1 || portable.shapes[0].len() != 2 || portable.shapes[0][1] != 3 {
                    return Err(EngineError::Config("affine rule expects one n x 3 tensor".into()));
                }
                let n_dates = portable.shapes[0][0];
                Ok((
                    StrategyParams::PayoffVolume(PvParams {
                        n_dates,
                        values: portable.values.into_iter().next().unwrap(),
                    }),
                    portable.contract_n,
                ))
            }
            "network" => {
                if portable.shapes.len() < 4 || portable.shapes.len() % 2 != 0 {
                    return Err(EngineError::Config(
                        "network expects alternating weight and bias tensors".into(),
                    ));
                }
                let mut dims = vec![portable.shapes[0][1]];
                for pair in portable.shapes.chunks(2) {
                    let (w, b) = (&pair[0], &pair[1]);
                    if w.len() != 2 || b.len() != 1 || w[0] != b[0] || w[1] != *dims.last().unwrap() {
                        return Err(EngineError::Config("network tensor shapes are inconsistent".into()));
                    }
                    dims.push(w[0]);
                }
                let values: Vec<f64> = portable.values.into_iter().flatten().collect();
                Ok((StrategyParams::Network(NnParams::from_parts(dims, values)?), portable.contract_n))
            }
            other => Err(EngineError::Config(format!("unknown strategy kind {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::build_corridor;
    use crate::models::{simulate_batch, OneFactorModel, DOMAIN_EVAL, DOMAIN_TRAIN};

    fn daily_terms() -> ContractTerms {
        ContractTerms::with_uniform_dates(31, 31.0 / 365.0, 0.0, 6.0, 140.0, 200.0, 20.0).unwrap()
    }

    fn small_terms(n: usize) -> ContractTerms {
        ContractTerms::with_uniform_dates(n, 1.0, 0.0, 1.0, 1.0, (n as f64 - 1.0).max(1.0), 20.0)
            .unwrap()
    }

    #[test]
    fn eta_degenerate_global_bounds() {
        let terms = ContractTerms::with_uniform_dates(4, 1.0, 0.0, 2.0, 6.0, 6.0, 20.0).unwrap();
        // Equal bounds: (q - 6) / 6.
        assert!((eta(&terms, 3.0).unwrap() - (-0.5)).abs() < 1e-15);
        assert_eq!(eta(&terms, 6.0).unwrap(), 0.0);
        let zero = ContractTerms::with_uniform_dates(4, 1.0, 0.0, 2.0, 0.0, 0.0, 20.0).unwrap();
        assert!(eta(&zero, 0.0).is_err());
    }

    #[test]
    fn affine_rule_score_is_the_stated_formula() {
        let terms = daily_terms();
        let corridor = build_corridor(&terms).unwrap();
        let ctx = RollContext::new(&terms, &corridor).unwrap();
        let params = StrategyParams::payoff_volume(31);
        let mut scratch = Scratch::default();
        // Row (1, -1, 0), payoff 2, eta = (0 - 140)/60.
        let e = eta(&terms, 0.0).unwrap();
        let chi = params.score(&ctx, 4, 2.0, e, &[], &mut scratch);
        assert!((chi - (2.0 + 140.0 / 60.0)).abs() < 1e-12);
    }

    #[test]
    fn forced_dates_ignore_the_score() {
        // Two dates, must buy exactly 2 in total with q_max = 1: both forced.
        let terms = ContractTerms::with_uniform_dates(2, 1.0, 0.0, 1.0, 2.0, 2.0, 20.0).unwrap();
        let corridor = build_corridor(&terms).unwrap();
        let ctx = RollContext::new(&terms, &corridor).unwrap();
        let mut params = StrategyParams::payoff_volume(2);
        // A score so negative the smooth fraction is ~0.
        params.values_mut().copy_from_slice(&[0.0, 0.0, -50.0, 0.0, 0.0, -50.0]);
        let model = OneFactorModel::flat(4.0, 0.7, 20.0, &terms.exercise_times).unwrap();
        let batch = simulate_batch(&model, 8, StreamKey::new(1, DOMAIN_EVAL, 0, 0)).unwrap();
        for mode in [DecisionMode::Smooth, DecisionMode::BangBang] {
            let roll = roll_strategy(&ctx, &params, &batch, mode).unwrap();
            for m in 0..batch.n_paths {
                for q in roll.volumes_of(m) {
                    assert!((q - 1.0).abs() < 1e-12, "forced purchase should be 1, got {q}");
                }
            }
        }
    }

    #[test]
    fn bang_bang_takes_the_upper_bound_on_a_zero_score() {
        let terms = small_terms(3);
        let corridor = build_corridor(&terms).unwrap();
        let ctx = RollContext::new(&terms, &corridor).unwrap();
        let mut params = StrategyParams::payoff_volume(3);
        params.values_mut().fill(0.0);
        let q = purchase(&ctx, &params, 0, 20.0, 0.0, &[], DecisionMode::BangBang).unwrap();
        assert_eq!(q, 1.0);
    }

    #[test]
    fn purchase_is_monotone_in_the_spot_when_only_payoff_matters() {
        let terms = daily_terms();
        let corridor = build_corridor(&terms).unwrap();
        let ctx = RollContext::new(&terms, &corridor).unwrap();
        let mut params = StrategyParams::payoff_volume(31);
        for k in 0..31 {
            params.values_mut()[3 * k..3 * k + 3].copy_from_slice(&[0.8, 0.0, 0.0]);
        }
        let mut last = -1.0;
        for spot in [15.0, 18.0, 20.0, 22.0, 30.0] {
            let q = purchase(&ctx, &params, 3, spot, 5.0, &[], DecisionMode::Smooth).unwrap();
            assert!(q >= last);
            last = q;
        }
    }

    #[test]
    fn decisions_only_read_the_current_date() {
        let terms = daily_terms();
        let corridor = build_corridor(&terms).unwrap();
        let ctx = RollContext::new(&terms, &corridor).unwrap();
        let params = StrategyParams::payoff_volume(31);
        let model = OneFactorModel::flat(4.0, 0.7, 20.0, &terms.exercise_times).unwrap();
        let mut batch = simulate_batch(&model, 4, StreamKey::new(9, DOMAIN_EVAL, 0, 0)).unwrap();
        let base = roll_strategy(&ctx, &params, &batch, DecisionMode::Smooth).unwrap();
        // Doubling the spot on the last date must leave every earlier
        // purchase untouched.
        for m in 0..batch.n_paths {
            batch.spots[m * 31 + 30] *= 2.0;
        }
        let bumped = roll_strategy(&ctx, &params, &batch, DecisionMode::Smooth).unwrap();
        for m in 0..batch.n_paths {
            assert_eq!(base.volumes_of(m)[..30], bumped.volumes_of(m)[..30]);
            assert_ne!(base.volumes_of(m)[30], bumped.volumes_of(m)[30]);
        }
    }

    #[test]
    fn rollout_is_feasible_for_random_parameters() {
        use rand::Rng;
        let terms = daily_terms();
        let corridor = build_corridor(&terms).unwrap();
        let ctx = RollContext::new(&terms, &corridor).unwrap();
        let model = OneFactorModel::flat(4.0, 0.7, 20.0, &terms.exercise_times).unwrap();
        let batch = simulate_batch(&model, 256, StreamKey::new(33, DOMAIN_TRAIN, 0, 0)).unwrap();
        let mut rng = StreamKey::new(54, DOMAIN_INIT, 0, 0).rng();
        for _ in 0..20 {
            let mut params = StrategyParams::payoff_volume(31);
            for v in params.values_mut() {
                *v = rng.random_range(-3.0..3.0);
            }
            for mode in [DecisionMode::Smooth, DecisionMode::BangBang] {
                let roll = roll_strategy(&ctx, &params, &batch, mode).unwrap();
                for m in 0..batch.n_paths {
                    let vols = roll.volumes_of(m);
                    let total: f64 = vols.iter().sum();
                    assert!(total >= 140.0 - 1e-9 && total <= 200.0 + 1e-9, "total {total}");
                    for q in vols {
                        assert!(*q >= -1e-9 && *q <= 6.0 + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_network_output_matches_the_affine_rule_bitwise() {
        let terms = daily_terms();
        let corridor = build_corridor(&terms).unwrap();
        let ctx = RollContext::new(&terms, &corridor).unwrap();
        // Zero hidden weights and biases: the output is exactly the final bias.
        let mut nn = NnParams::init(&[10, 10], 1, 7).unwrap();
        let n_values = nn.values.len();
        nn.values[..n_values - 3].fill(0.0);
        nn.values[n_values - 3..].copy_from_slice(&[1.0, -1.0, 0.0]);
        let nn = StrategyParams::Network(nn);
        let pv = StrategyParams::payoff_volume(31);

        let model = OneFactorModel::flat(4.0, 0.7, 20.0, &terms.exercise_times).unwrap();
        let batch = simulate_batch(&model, 64, StreamKey::new(3, DOMAIN_EVAL, 0, 0)).unwrap();
        for mode in [DecisionMode::Smooth, DecisionMode::BangBang] {
            let a = roll_strategy(&ctx, &nn, &batch, mode).unwrap();
            let b = roll_strategy(&ctx, &pv, &batch, mode).unwrap();
            assert_eq!(a.volumes, b.volumes);
            assert_eq!(a.rewards, b.rewards);
        }
    }

    #[test]
    fn network_initialization_has_the_documented_shape() {
        let nn = NnParams::init(&[10, 10], 0, 123).unwrap();
        assert_eq!(nn.dims, vec![3, 10, 10, 3]);
        assert_eq!(nn.values.len(), 183);
        assert_eq!(nn.biases(0), &[0.01; 10]);
        assert_eq!(nn.biases(2), &[1.0, -1.0, 0.0]);
        let bound = 1.0 / (10.0f64).sqrt();
        assert!(nn.weights(1).iter().all(|w| w.abs() < bound));
        // Reproducible from the seed.
        let again = NnParams::init(&[10, 10], 0, 123).unwrap();
        assert_eq!(nn.values, again.values);
    }

    #[test]
    fn parameters_round_trip_through_json() {
        let pv = StrategyParams::payoff_volume(5);
        let (back, n) = StrategyParams::from_json(&pv.to_json(5)).unwrap();
        assert_eq!(n, 5);
        assert_eq!(back, pv);

        let nn = StrategyParams::network(&[10, 10], 3, 99).unwrap();
        let (back, n) = StrategyParams::from_json(&nn.to_json(31)).unwrap();
        assert_eq!(n, 31);
        assert_eq!(back, nn);
        if let StrategyParams::Network(p) = &back {
            assert_eq!(p.state_dim(), 3);
        } else {
            panic!("expected a network");
        }
    }

    #[test]
    fn incompatible_parameters_are_rejected() {
        let terms = daily_terms();
        let pv = StrategyParams::payoff_volume(12);
        assert!(pv.check_compatible(&terms, 1).is_err());
        let nn = StrategyParams::network(&[10], 3, 1).unwrap();
        assert!(nn.check_compatible(&terms, 1).is_err());
        assert!(nn.check_compatible(&terms, 3).is_ok());
    }
}
