//! Exact reference prices for tiny contracts on a binomial lattice.
//!
//! With discrete spots and a discrete volume grid, the optimal purchase
//! policy is computable by backward induction over (date, tree node,
//! cumulative volume), giving a ground-truth value that trained strategies
//! can be measured against. The induction here is deliberately
//! self-contained — it derives its reachable volume windows from scratch in
//! integer grid units rather than reusing the engine's corridor, so the two
//! implementations check each other.

use crate::models::PathSource;
use crate::contract::ContractTerms;
use crate::EngineError;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Hard ceilings keeping instances enumerable.
const MAX_DATES: usize = 10;
const MAX_STATES: usize = 100_000;
/// Allowed relative distance from a volume to its nearest grid point.
const ALIGN_TOL: f64 = 1e-9;

/// A recombining binomial spot lattice with a volume grid step.
///
/// Date `l` has `l + 1` nodes in ascending order; from node `j` the path
/// moves to node `j + 1` with probability `up_prob`, else stays at `j`.
#[derive(Debug, Clone)]
pub struct LatticeSpec {
    nodes: Vec<Vec<f64>>,
    up_prob: f64,
    volume_step: f64,
    times: Vec<f64>,
    /// Expected spot per date under the lattice measure.
    expected: Vec<f64>,
}

impl LatticeSpec {
    /// Lattice with explicitly listed node spots (`nodes[l]` must hold
    /// `l + 1` ascending values).
    pub fn from_nodes(
        nodes: Vec<Vec<f64>>,
        up_prob: f64,
        times: &[f64],
        volume_step: f64,
    ) -> Result<Self, EngineError> {
        if nodes.is_empty() || nodes.len() != times.len() {
            return Err(EngineError::Config(
                "the lattice needs one non-empty node list per purchase date".into(),
            ));
        }
        for (l, level) in nodes.iter().enumerate() {
            if level.len() != l + 1 {
                return Err(EngineError::Config(format!(
                    "date {l} must have {} nodes, got {}",
                    l + 1,
                    level.len()
                )));
            }
            if level.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(EngineError::Config(format!("date {l} has a non-positive spot")));
            }
            if level.windows(2).any(|w| w[1] < w[0]) {
                return Err(EngineError::Config(format!("date {l} nodes must be ascending")));
            }
        }
        if !(0.0..=1.0).contains(&up_prob) {
            return Err(EngineError::Config(format!(
                "up probability must lie in [0, 1], got {up_prob}"
            )));
        }
        if !(volume_step.is_finite() && volume_step > 0.0) {
            return Err(EngineError::Config(format!(
                "volume step must be positive, got {volume_step}"
            )));
        }
        if times[0] < 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EngineError::Config(
                "lattice dates must be non-negative and increasing".into(),
            ));
        }

        // Binomial node weights, date by date.
        let mut expected = Vec::with_capacity(nodes.len());
        let mut weights = vec![1.0];
        for level in &nodes {
            expected.push(level.iter().zip(&weights).map(|(s, w)| s * w).sum());
            let mut next = vec![0.0; weights.len() + 1];
            for (j, w) in weights.iter().enumerate() {
                next[j] += w * (1.0 - up_prob);
                next[j + 1] += w * up_prob;
            }
            weights = next;
        }
        Ok(LatticeSpec { nodes, up_prob, volume_step, times: times.to_vec(), expected })
    }

    /// Standard recombining tree: node `j` at date `l` carries
    /// `s0 * up^j * down^(l-j)`.
    pub fn binomial(
        s0: f64,
        up: f64,
        down: f64,
        up_prob: f64,
        times: &[f64],
        volume_step: f64,
    ) -> Result<Self, EngineError> {
        if !(s0.is_finite() && s0 > 0.0) || !(up.is_finite() && up > 0.0) || !(down.is_finite() && down > 0.0) {
            return Err(EngineError::Config("spot and move factors must be positive".into()));
        }
        if down > up {
            return Err(EngineError::Config(format!("down factor {down} exceeds up factor {up}")));
        }
        let nodes = (0..times.len())
            .map(|l| (0..=l).map(|j| s0 * up.powi(j as i32) * down.powi((l - j) as i32)).collect())
            .collect();
        Self::from_nodes(nodes, up_prob, times, volume_step)
    }

    pub fn n_dates(&self) -> usize {
        self.nodes.len()
    }

    /// Spot at `(date, node)`.
    pub fn spot(&self, l: usize, node: usize) -> f64 {
        self.nodes[l][node]
    }

    pub fn up_prob(&self) -> f64 {
        self.up_prob
    }

    pub fn volume_step(&self) -> f64 {
        self.volume_step
    }
}

impl PathSource for LatticeSpec {
    fn n_dates(&self) -> usize {
        self.nodes.len()
    }

    fn state_dim(&self) -> usize {
        0
    }

    fn times(&self) -> &[f64] {
        &self.times
    }

    fn date_forwards(&self) -> Option<&[f64]> {
        Some(&self.expected)
    }

    /// The forward-delta identity is about lognormal factor models; a tree
    /// measure has no such structure.
    fn supports_forward_delta(&self) -> bool {
        false
    }

    fn fill_path(&self, rng: &mut ChaCha8Rng, spots: &mut [f64], _states: &mut [f64]) {
        let mut node = 0usize;
        for (l, s) in spots.iter_mut().enumerate() {
            *s = self.nodes[l][node];
            if rng.random::<f64>() < self.up_prob {
                node += 1;
            }
        }
    }
}

/// Exact optimum of a lattice instance, with its purchase policy.
#[derive(Debug, Clone)]
pub struct LatticeSolution {
    pub value: f64,
    volume_step: f64,
    /// Per date: first reachable volume (in grid units) and window length.
    windows: Vec<(i64, usize)>,
    /// Per date: chosen purchase in grid units, indexed
    /// `node * window_len + (volume - window_start)`.
    policy: Vec<Vec<i64>>,
}

impl LatticeSolution {
    /// Optimal purchase at `(date, node)` given `cum_volume` bought so far,
    /// or `None` when that volume is not a reachable grid point.
    pub fn purchase(&self, l: usize, node: usize, cum_volume: f64) -> Option<f64> {
        let units = to_units(cum_volume, self.volume_step).ok()?;
        let (start, len) = self.windows[l];
        if units < start || units >= start + len as i64 || node > l {
            return None;
        }
        let idx = node * len + (units - start) as usize;
        Some(self.policy[l][idx] as f64 * self.volume_step)
    }
}

fn to_units(volume: f64, step: f64) -> Result<i64, EngineError> {
    let ratio = volume / step;
    let rounded = ratio.round();
    if (ratio - rounded).abs() > ALIGN_TOL * ratio.abs().max(1.0) {
        return Err(EngineError::Config(format!(
            "volume {volume} is not a multiple of the grid step {step}"
        )));
    }
    Ok(rounded as i64)
}

/// Exact optimal value of `terms` under the lattice measure, by backward
/// induction over (date, node, cumulative volume).
///
/// Only volumes from which the global bounds are still attainable are
/// enumerated, and every date maximizes over the two admissible extremes
/// (its purchase range ends), which is sufficient because the value is
/// piecewise linear in the volume. All contract volumes must sit on the
/// lattice volume grid; misaligned inputs are an error, never rounded.
pub fn dp_value(terms: &ContractTerms, lattice: &LatticeSpec) -> Result<LatticeSolution, EngineError> {
    terms.validate()?;
    let n = terms.n;
    if n != lattice.n_dates() {
        return Err(EngineError::Config(format!(
            "lattice has {} dates but the contract has {n}",
            lattice.n_dates()
        )));
    }
    if n > MAX_DATES {
        return Err(EngineError::Config(format!(
            "lattice pricing is limited to {MAX_DATES} dates, got {n}"
        )));
    }
    let step = lattice.volume_step;
    let q_min: Vec<i64> = terms.q_min.iter().map(|q| to_units(*q, step)).collect::<Result<_, _>>()?;
    let q_max: Vec<i64> = terms.q_max.iter().map(|q| to_units(*q, step)).collect::<Result<_, _>>()?;
    let g_min = to_units(terms.global_min, step)?;
    let g_max = to_units(terms.global_max, step)?;

    // Reachable cumulative-volume window before each date's purchase: at
    // least the forced minimum so far and whatever the remaining capacity
    // still demands for the global floor; at most the capacity so far and
    // whatever the remaining forced purchases leave below the global cap.
    let mut cum_min = vec![0i64; n + 1];
    let mut cum_max = vec![0i64; n + 1];
    for l in 0..n {
        cum_min[l + 1] = cum_min[l] + q_min[l];
        cum_max[l + 1] = cum_max[l] + q_max[l];
    }
    let total_min = cum_min[n];
    let total_max = cum_max[n];
    let mut windows = Vec::with_capacity(n + 1);
    let mut n_states = 0usize;
    for l in 0..=n {
        let lo = cum_min[l].max(g_min - (total_max - cum_max[l])).max(0);
        let hi = cum_max[l].min(g_max - (total_min - cum_min[l]));
        if lo > hi {
            return Err(EngineError::Infeasible(format!(
                "no reachable volume before date {l} satisfies the global bounds"
            )));
        }
        let len = (hi - lo + 1) as usize;
        windows.push((lo, len));
        if l < n {
            n_states += (l + 1) * len;
        }
    }
    if n_states > MAX_STATES {
        return Err(EngineError::Config(format!(
            "lattice instance has {n_states} states, above the {MAX_STATES} ceiling"
        )));
    }

    // Terminal value is zero on every admissible volume, so the last date
    // only needs the terminal window, not a value table.
    let (mut next_start, mut next_len) = windows[n];
    let mut next_values = Vec::new();
    let mut policy = vec![Vec::new(); n];
    for l in (0..n).rev() {
        let (start, len) = windows[l];
        let n_nodes = l + 1;
        let mut values = vec![f64::NEG_INFINITY; n_nodes * len];
        let mut decisions = vec![0i64; n_nodes * len];
        for node in 0..n_nodes {
            let payoff = lattice.nodes[l][node] - terms.strike;
            for i in 0..len {
                let volume = start + i as i64;
                let q_lo = q_min[l].max(next_start - volume);
                let q_hi = q_max[l].min(next_start + next_len as i64 - 1 - volume);
                debug_assert!(q_lo <= q_hi, "window construction left an empty purchase range");
                let mut best = f64::NEG_INFINITY;
                let mut best_q = q_lo;
                // Upper endpoint first so that ties settle on it.
                for q in [q_hi, q_lo] {
                    let v_next = (volume + q - next_start) as usize;
                    let cont = if l + 1 < n {
                        let down = next_values[node * next_len + v_next];
                        let up = next_values[(node + 1) * next_len + v_next];
                        lattice.up_prob * up + (1.0 - lattice.up_prob) * down
                    } else {
                        0.0
                    };
                    let total = q as f64 * step * payoff + cont;
                    if total > best {
                        best = total;
                        best_q = q;
                    }
                }
                values[node * len + i] = best;
                decisions[node * len + i] = best_q;
            }
        }
        policy[l] = decisions;
        next_values = values;
        next_start = start;
        next_len = len;
    }

    Ok(LatticeSolution {
        value: next_values[0],
        volume_step: step,
        windows: windows[..n].to_vec(),
        policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::normalize;
    use crate::strategies::{DecisionMode, StrategyParams};
    use crate::valuation::price;

    fn uniform_times(n: usize) -> Vec<f64> {
        (0..n).map(|l| l as f64 / n as f64).collect()
    }

    /// Expected reward of following `sol`'s policy, by exhaustive
    /// enumeration of every node path with its probability.
    fn policy_expectation(terms: &ContractTerms, lattice: &LatticeSpec, sol: &LatticeSolution) -> f64 {
        let n = terms.n;
        let mut total = 0.0;
        let n_paths = 1usize << (n - 1);
        for bits in 0..n_paths {
            let mut prob = 1.0;
            let mut node = 0usize;
            let mut volume = 0.0;
            let mut reward = 0.0;
            for l in 0..n {
                let q = sol.purchase(l, node, volume).expect("policy path stays on the grid");
                reward += q * (lattice.spot(l, node) - terms.strike);
                volume += q;
                if l + 1 < n {
                    if bits >> l & 1 == 1 {
                        node += 1;
                        prob *= lattice.up_prob();
                    } else {
                        prob *= 1.0 - lattice.up_prob();
                    }
                }
            }
            assert!(volume >= terms.global_min - 1e-9 && volume <= terms.global_max + 1e-9);
            total += prob * reward;
        }
        total
    }

    #[test]
    fn buying_the_single_unit_early_is_optimal() {
        // One unit must be bought over two dates; the certain payoff today
        // beats the zero-mean payoff tomorrow.
        let lattice =
            LatticeSpec::from_nodes(vec![vec![22.0], vec![15.0, 25.0]], 0.5, &uniform_times(2), 1.0)
                .unwrap();
        let terms = ContractTerms::with_dates(uniform_times(2), 1.0, 0.0, 1.0, 1.0, 1.0, 20.0).unwrap();
        let sol = dp_value(&terms, &lattice).unwrap();
        assert!((sol.value - 2.0).abs() < 1e-12);
        assert_eq!(sol.purchase(0, 0, 0.0), Some(1.0));
        assert_eq!(sol.purchase(1, 0, 1.0), Some(0.0));
        assert_eq!(sol.purchase(1, 1, 1.0), Some(0.0));
    }

    #[test]
    fn unconstrained_deterministic_path_buys_greedily() {
        // All nodes of a date carry the same spot, so the path is
        // deterministic; without a binding global constraint the optimum is
        // the sum of positive parts at full volume.
        let spots = [22.0, 18.0, 21.0];
        let nodes = (0..3).map(|l| vec![spots[l]; l + 1]).collect();
        let lattice = LatticeSpec::from_nodes(nodes, 0.5, &uniform_times(3), 1.0).unwrap();
        let terms = ContractTerms::with_dates(uniform_times(3), 1.0, 0.0, 2.0, 0.0, 6.0, 20.0).unwrap();
        let sol = dp_value(&terms, &lattice).unwrap();
        assert!((sol.value - (2.0 * 2.0 + 0.0 + 2.0 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn fully_forced_value_is_the_expected_payoff_sum() {
        let times = uniform_times(5);
        let lattice = LatticeSpec::binomial(20.0, 1.15, 0.9, 0.4, &times, 1.0).unwrap();
        let terms = ContractTerms::with_dates(times, 1.0, 0.0, 3.0, 15.0, 15.0, 19.0).unwrap();
        let sol = dp_value(&terms, &lattice).unwrap();
        let forwards = lattice.date_forwards().unwrap();
        let expect: f64 = forwards.iter().map(|f| 3.0 * (f - 19.0)).sum();
        assert!((sol.value - expect).abs() < 1e-10, "{} vs {expect}", sol.value);
    }

    #[test]
    fn following_the_policy_reproduces_the_value() {
        let times = uniform_times(4);
        let lattice = LatticeSpec::binomial(20.0, 1.2, 0.85, 0.45, &times, 1.0).unwrap();
        let terms = ContractTerms::with_dates(times, 1.0, 0.0, 2.0, 3.0, 5.0, 20.0).unwrap();
        let sol = dp_value(&terms, &lattice).unwrap();
        let replayed = policy_expectation(&terms, &lattice, &sol);
        assert!((sol.value - replayed).abs() < 1e-12, "{} vs {replayed}", sol.value);
        assert!(sol.value > 0.0);
    }

    #[test]
    fn wider_global_bounds_never_hurt() {
        let times = uniform_times(5);
        let lattice = LatticeSpec::binomial(20.0, 1.2, 0.85, 0.5, &times, 1.0).unwrap();
        let value = |g_min: f64, g_max: f64| {
            let terms =
                ContractTerms::with_dates(times.clone(), 1.0, 0.0, 2.0, g_min, g_max, 20.0).unwrap();
            dp_value(&terms, &lattice).unwrap().value
        };
        let mut prev = f64::NEG_INFINITY;
        for g_max in [2.0, 4.0, 6.0, 8.0, 10.0] {
            let v = value(2.0, g_max);
            assert!(v >= prev - 1e-12, "value fell from {prev} to {v} as g_max grew");
            prev = v;
        }
        let mut prev = f64::INFINITY;
        for g_min in [0.0, 2.0, 4.0, 6.0, 8.0] {
            let v = value(g_min, 8.0);
            assert!(v <= prev + 1e-12, "value rose from {prev} to {v} as g_min grew");
            prev = v;
        }
    }

    #[test]
    fn misaligned_volumes_are_rejected_not_rounded() {
        let times = uniform_times(3);
        let lattice = LatticeSpec::binomial(20.0, 1.1, 0.9, 0.5, &times, 0.4).unwrap();
        let terms = ContractTerms::with_dates(times, 1.0, 0.0, 1.0, 0.0, 2.0, 20.0).unwrap();
        // 1.0 and 2.0 are not multiples of 0.4.
        let err = dp_value(&terms, &lattice).unwrap_err();
        assert!(matches!(err, EngineError::Config(_)));
    }

    #[test]
    fn oversized_instances_are_rejected() {
        let times_11 = (0..11).map(|l| l as f64 / 11.0).collect::<Vec<_>>();
        let lattice = LatticeSpec::binomial(20.0, 1.1, 0.9, 0.5, &times_11, 1.0).unwrap();
        let terms =
            ContractTerms::with_dates(times_11, 1.0, 0.0, 1.0, 0.0, 11.0, 20.0).unwrap();
        assert!(matches!(dp_value(&terms, &lattice), Err(EngineError::Config(_))));

        // A fine volume grid blows the state budget at the date ceiling.
        let times_10 = uniform_times(10);
        let lattice = LatticeSpec::binomial(20.0, 1.1, 0.9, 0.5, &times_10, 0.01).unwrap();
        let terms =
            ContractTerms::with_dates(times_10, 1.0, 0.0, 10.0, 0.0, 100.0, 20.0).unwrap();
        assert!(matches!(dp_value(&terms, &lattice), Err(EngineError::Config(_))));
    }

    #[test]
    fn simulated_paths_live_on_the_tree() {
        use crate::models::{simulate_batch, StreamKey, DOMAIN_EVAL};
        let times = uniform_times(4);
        let lattice = LatticeSpec::binomial(20.0, 1.2, 0.85, 0.3, &times, 1.0).unwrap();
        let batch = simulate_batch(&lattice, 2000, StreamKey::new(77, DOMAIN_EVAL, 0, 0)).unwrap();
        let mut up_steps = 0usize;
        for m in 0..batch.n_paths {
            let spots = batch.spots_of(m);
            assert_eq!(spots[0], 20.0);
            for l in 0..4 {
                assert!(
                    (0..=l).any(|j| spots[l] == lattice.spot(l, j)),
                    "spot {} is not a date-{l} node",
                    spots[l]
                );
            }
            if spots[1] > 20.0 {
                up_steps += 1;
            }
        }
        // Up frequency of the first step tracks its probability.
        let freq = up_steps as f64 / 2000.0;
        assert!((freq - 0.3).abs() < 0.03, "up frequency {freq}");
    }

    #[test]
    fn no_parametric_strategy_beats_the_exact_optimum() {
        let times = uniform_times(5);
        let lattice = LatticeSpec::binomial(20.0, 1.25, 0.8, 0.5, &times, 1.0).unwrap();
        let terms = ContractTerms::with_dates(times, 1.0, 0.0, 2.0, 2.0, 6.0, 20.0).unwrap();
        let sol = dp_value(&terms, &lattice).unwrap();
        let mut trials: Vec<StrategyParams> = vec![StrategyParams::payoff_volume(5)];
        for (seed, scale) in [(1u64, 0.3), (2, 2.0), (3, 12.0)] {
            let mut p = StrategyParams::network(&[6], 0, seed).unwrap();
            p.values_mut().iter_mut().for_each(|v| *v *= scale);
            trials.push(p);
        }
        for (i, params) in trials.iter().enumerate() {
            for mode in [DecisionMode::Smooth, DecisionMode::BangBang] {
                let est = price(&terms, &lattice, params, 4000, mode, 900 + i as u64).unwrap();
                assert!(
                    est.mean <= sol.value + 3.0 * est.std_error,
                    "trial {i} {mode:?}: {} beats the optimum {}",
                    est.mean,
                    sol.value
                );
            }
        }
    }

    #[test]
    fn forced_minimum_contracts_agree_with_their_normalized_form() {
        // A contract with a positive local floor prices as its fixed leg
        // plus the rescaled optional contract; the induction here handles
        // the floor directly, giving an independent check of that identity.
        let times = uniform_times(4);
        let lattice = LatticeSpec::binomial(20.0, 1.2, 0.85, 0.45, &times, 1.0).unwrap();
        let terms = ContractTerms::with_dates(times.clone(), 1.0, 1.0, 3.0, 6.0, 10.0, 20.0).unwrap();
        let direct = dp_value(&terms, &lattice).unwrap();

        let norm = normalize(&terms).unwrap();
        // The optional leg lives on a unit volume grid scaled by its span.
        let optional_lattice =
            LatticeSpec::binomial(20.0, 1.2, 0.85, 0.45, &times, 1.0 / norm.optional_volume).unwrap();
        let optional = dp_value(&norm.terms, &optional_lattice).unwrap();
        let forwards = lattice.date_forwards().unwrap();
        let fixed: f64 =
            forwards.iter().map(|f| norm.fixed_volume * (f - terms.strike)).sum();
        let recombined = fixed + norm.optional_volume * optional.value;
        assert!(
            (direct.value - recombined).abs() < 1e-10,
            "direct {} vs normalized {recombined}",
            direct.value
        );
    }
}
