//! Swing contract terms, the cumulative-volume corridor and the per-date
//! admissible purchase range.
//!
//! A contract gives the holder `n` purchase dates. On each date the purchased
//! volume must stay inside the local bounds `[q_min, q_max]` and the final
//! cumulative volume must land inside the firm global bounds
//! `[global_min, global_max]` — there is no penalty escape. The corridor
//! stores, per date, the cumulative volumes from which the global constraint
//! is still attainable; the admissible range narrows the local bounds so that
//! staying inside it keeps the contract feasible by construction.

use crate::EngineError;

/// Static terms of a swing contract.
///
/// Local bounds are stored per date so that aggregated contracts — whose
/// buckets sum the bounds of their member dates and therefore differ date to
/// date — are first-class. Contracts quoted with one bound for every date
/// use the scalar constructors, which splat.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractTerms {
    /// Number of purchase dates.
    pub n: usize,
    /// Purchase dates in year fractions, strictly increasing, first at `t >= 0`.
    pub exercise_times: Vec<f64>,
    /// Contract maturity in year fractions; strictly after the last purchase date.
    pub maturity: f64,
    /// Minimum volume per date, one entry per date.
    pub q_min: Vec<f64>,
    /// Maximum volume per date, one entry per date.
    pub q_max: Vec<f64>,
    /// Firm lower bound on the final cumulative volume.
    pub global_min: f64,
    /// Firm upper bound on the final cumulative volume.
    pub global_max: f64,
    /// Fixed purchase price.
    pub strike: f64,
}

impl ContractTerms {
    /// Terms with purchase dates on the uniform grid `t_l = l * maturity / n`
    /// and the same local bounds on every date.
    pub fn with_uniform_dates(
        n: usize,
        maturity: f64,
        q_min: f64,
        q_max: f64,
        global_min: f64,
        global_max: f64,
        strike: f64,
    ) -> Result<Self, EngineError> {
        if n == 0 {
            return Err(EngineError::Config("contract needs at least one purchase date".into()));
        }
        if !(maturity.is_finite() && maturity > 0.0) {
            return Err(EngineError::Config(format!("maturity must be positive, got {maturity}")));
        }
        let dt = maturity / n as f64;
        let exercise_times = (0..n).map(|l| l as f64 * dt).collect();
        Self::with_dates(exercise_times, maturity, q_min, q_max, global_min, global_max, strike)
    }

    /// Terms with an explicit purchase-date grid and uniform local bounds
    /// (delivery schedules that start after the valuation date).
    pub fn with_dates(
        exercise_times: Vec<f64>,
        maturity: f64,
        q_min: f64,
        q_max: f64,
        global_min: f64,
        global_max: f64,
        strike: f64,
    ) -> Result<Self, EngineError> {
        let n = exercise_times.len();
        Self::with_local_bounds(
            exercise_times,
            maturity,
            vec![q_min; n],
            vec![q_max; n],
            global_min,
            global_max,
            strike,
        )
    }

    /// Fully general terms with per-date local bounds (aggregated contracts).
    pub fn with_local_bounds(
        exercise_times: Vec<f64>,
        maturity: f64,
        q_min: Vec<f64>,
        q_max: Vec<f64>,
        global_min: f64,
        global_max: f64,
        strike: f64,
    ) -> Result<Self, EngineError> {
        let terms = ContractTerms {
            n: exercise_times.len(),
            exercise_times,
            maturity,
            q_min,
            q_max,
            global_min,
            global_max,
            strike,
        };
        terms.validate()?;
        Ok(terms)
    }

    /// The shared `(q_min, q_max)` when every date has the same local bounds.
    pub fn uniform_bounds(&self) -> Option<(f64, f64)> {
        let (lo, hi) = (self.q_min[0], self.q_max[0]);
        if self.q_min.iter().all(|v| *v == lo) && self.q_max.iter().all(|v| *v == hi) {
            Some((lo, hi))
        } else {
            None
        }
    }

    /// Sum of the per-date minimum volumes (the forced total).
    pub fn total_min(&self) -> f64 {
        self.q_min.iter().sum()
    }

    /// Sum of the per-date maximum volumes (the reachable total).
    pub fn total_max(&self) -> f64 {
        self.q_max.iter().sum()
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.n == 0 || self.exercise_times.len() != self.n {
            return Err(EngineError::Config("exercise date grid is empty or inconsistent".into()));
        }
        if self.q_min.len() != self.n || self.q_max.len() != self.n {
            return Err(EngineError::Config(format!(
                "local bounds must have one entry per date ({} / {} entries for {} dates)",
                self.q_min.len(),
                self.q_max.len(),
                self.n
            )));
        }
        for (l, t) in self.exercise_times.iter().enumerate() {
            if !t.is_finite() || *t < 0.0 {
                return Err(EngineError::Config(format!("exercise time {l} is invalid: {t}")));
            }
            if l > 0 && *t <= self.exercise_times[l - 1] {
                return Err(EngineError::Config(format!(
                    "exercise times must be strictly increasing (index {l})"
                )));
            }
        }
        if !(self.maturity.is_finite() && self.maturity > self.exercise_times[self.n - 1]) {
            return Err(EngineError::Config(format!(
                "maturity {} must lie strictly after the last purchase date {}",
                self.maturity,
                self.exercise_times[self.n - 1]
            )));
        }
        for l in 0..self.n {
            let (lo, hi) = (self.q_min[l], self.q_max[l]);
            if !lo.is_finite() || !hi.is_finite() || lo < 0.0 || hi < lo {
                return Err(EngineError::Config(format!(
                    "per-date bounds need 0 <= q_min <= q_max, got [{lo}, {hi}] on date {l}"
                )));
            }
        }
        for (name, v) in [
            ("global_min", self.global_min),
            ("global_max", self.global_max),
            ("strike", self.strike),
        ] {
            if !v.is_finite() {
                return Err(EngineError::Config(format!("{name} must be finite, got {v}")));
            }
        }
        if self.global_min < 0.0 || self.global_max < self.global_min {
            return Err(EngineError::Config(format!(
                "global bounds need 0 <= global_min <= global_max, got [{}, {}]",
                self.global_min, self.global_max
            )));
        }
        // The global range must intersect the cumulative volumes reachable
        // under the local bounds; otherwise no purchase plan exists.
        let forced = self.total_min();
        let reach = self.total_max();
        if forced > self.global_max + FEAS_TOL * self.global_max.max(1.0) {
            return Err(EngineError::Infeasible(format!(
                "forced minimum volume {forced} exceeds global_max {}",
                self.global_max
            )));
        }
        if reach < self.global_min - FEAS_TOL * self.global_min.max(1.0) {
            return Err(EngineError::Infeasible(format!(
                "maximum attainable volume {reach} is below global_min {}",
                self.global_min
            )));
        }
        Ok(())
    }
}

const FEAS_TOL: f64 = 1e-12;

/// Reachability tolerance for cumulative-volume queries: float drift from
/// accumulating hundreds of purchases stays far below this.
const REACH_TOL: f64 = 1e-9;

/// Per-date bounds on the cumulative volume from which the global constraint
/// is still attainable. Index `l` holds the bounds that apply right before
/// the purchase on date `l`; index `n` holds the terminal bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeCorridor {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Builds the corridor for a contract with `q_min == 0`.
///
/// Lower bound: 0 at the start, `max(0, global_min - remaining capacity)` in
/// between, `global_min` at maturity — where the remaining capacity is the
/// sum of `q_max` over the dates still to come (`(n-l) * q_max` when bounds
/// are uniform). Upper bound: 0 at the start, `min(capacity so far,
/// global_max)` in between, `global_max` at maturity. Contracts with
/// `q_min > 0` are handled by [`normalize`], which maps them onto an
/// equivalent contract with a zero local minimum.
pub fn build_corridor(terms: &ContractTerms) -> Result<VolumeCorridor, EngineError> {
    terms.validate()?;
    let n = terms.n;
    // Capacity of dates l..n, by backward accumulation.
    let mut remaining = vec![0.0; n + 1];
    for l in (0..n).rev() {
        remaining[l] = remaining[l + 1] + terms.q_max[l];
    }
    if remaining[0] < terms.global_min {
        return Err(EngineError::Infeasible(format!(
            "global_min {} is not reachable with a total capacity of {}",
            terms.global_min, remaining[0]
        )));
    }
    let mut lower = Vec::with_capacity(n + 1);
    let mut upper = Vec::with_capacity(n + 1);
    lower.push(0.0);
    upper.push(0.0);
    let mut so_far = 0.0;
    for l in 1..n {
        so_far += terms.q_max[l - 1];
        lower.push((terms.global_min - remaining[l]).max(0.0));
        upper.push(so_far.min(terms.global_max));
    }
    lower.push(terms.global_min);
    upper.push(terms.global_max);
    Ok(VolumeCorridor { lower, upper })
}

/// Admissible purchase range `[a_minus, a_plus]` on date `l` given the
/// cumulative volume `q_cum` purchased so far.
///
/// The next cumulative volume must land in
/// `[max(lower[l+1], q_cum + q_min), min(upper[l+1], q_cum + q_max)]`;
/// the returned range is that interval shifted by `-q_cum`.
pub fn admissible_interval(
    terms: &ContractTerms,
    corridor: &VolumeCorridor,
    l: usize,
    q_cum: f64,
) -> Result<(f64, f64), EngineError> {
    if l >= terms.n {
        return Err(EngineError::State(format!(
            "date index {l} out of range for a contract with {} dates",
            terms.n
        )));
    }
    let tol = REACH_TOL * terms.global_max.max(1.0);
    if q_cum < corridor.lower[l] - tol || q_cum > corridor.upper[l] + tol {
        return Err(EngineError::State(format!(
            "cumulative volume {q_cum} is not reachable on date {l} (corridor [{}, {}])",
            corridor.lower[l], corridor.upper[l]
        )));
    }
    let lo = corridor.lower[l + 1].max(q_cum + terms.q_min[l]);
    let hi = corridor.upper[l + 1].min(q_cum + terms.q_max[l]);
    Ok((lo - q_cum, hi - q_cum))
}

/// A contract with `q_min > 0` split into a deterministic fixed leg and an
/// optional leg with unit local bounds.
///
/// The original price is recovered as
/// `fixed_volume * E[sum of (S - K)] + optional_volume * optional price`.
#[derive(Debug, Clone)]
pub struct NormalizedContract {
    /// Equivalent contract with `q_min = 0`, `q_max = 1` and rescaled
    /// global bounds.
    pub terms: ContractTerms,
    /// Volume bought unconditionally on every date (the original `q_min`).
    pub fixed_volume: f64,
    /// Scale of the optional leg (the original `q_max - q_min`). Zero for
    /// degenerate contracts whose purchases are fully forced.
    pub optional_volume: f64,
}

/// Rescales a contract so that per-date purchases live in `[0, 1]`.
///
/// Global bounds map to `(global - n * q_min)+ / (q_max - q_min)`. When
/// `q_max == q_min` every purchase is forced and only the fixed leg remains.
/// Defined for uniform local bounds; aggregated contracts (per-date bounds)
/// already have a zero local minimum and never need this mapping.
pub fn normalize(terms: &ContractTerms) -> Result<NormalizedContract, EngineError> {
    terms.validate()?;
    let (q_min, q_max) = terms.uniform_bounds().ok_or_else(|| {
        EngineError::Config(
            "normalization is defined for contracts with identical local bounds on every date"
                .into(),
        )
    })?;
    let span = q_max - q_min;
    let nf = terms.n as f64;
    if span == 0.0 {
        let degenerate = ContractTerms {
            q_min: vec![0.0; terms.n],
            q_max: vec![1.0; terms.n],
            global_min: 0.0,
            global_max: 0.0,
            ..terms.clone()
        };
        return Ok(NormalizedContract {
            terms: degenerate,
            fixed_volume: q_min,
            optional_volume: 0.0,
        });
    }
    let global_min = ((terms.global_min - nf * q_min).max(0.0)) / span;
    let global_max = ((terms.global_max - nf * q_min).max(0.0)) / span;
    let normalized = ContractTerms {
        q_min: vec![0.0; terms.n],
        q_max: vec![1.0; terms.n],
        global_min,
        global_max,
        ..terms.clone()
    };
    normalized.validate()?;
    Ok(NormalizedContract {
        terms: normalized,
        fixed_volume: q_min,
        optional_volume: span,
    })
}
