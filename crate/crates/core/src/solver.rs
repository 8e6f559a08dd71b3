//! Water-filling solver for the budget-constrained allocation.
//!
//! For a dual price `lambda` every phase's optimal amount has a closed form
//! (see [`crate::objectives`]); the total `S(lambda)` is continuous and
//! non-increasing, so the price that spends exactly the budget is found by
//! bisection. The search runs on `ln lambda`, which keeps the bracket finite
//! for any combination of rates and budget.
//!
//! [`grid_oracle`] enumerates a simplex grid and is meant for tests only.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::PhaseCurve;
use crate::error::{Error, Result};
use crate::objectives::{
    self, evaluate, log_starvation_threshold, response_at_log_price, Objective, ObjectiveKind,
};

/// Default relative budget tolerance (`tolerance = 1e-9 * budget`).
pub const DEFAULT_RELATIVE_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_MAX_ITERATIONS: usize = 200;
/// Largest number of grid points [`grid_oracle`] will enumerate by default.
pub const DEFAULT_GRID_LIMIT: u64 = 50_000_000;

/// Factor applied past the largest finite threshold when some phase can never starve.
const INFINITE_THRESHOLD_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub budget: f64,
    /// Absolute tolerance on `|sum x - budget|`; `None` means `1e-9 * budget`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Optional per-phase upper bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caps: Option<Vec<f64>>,
}

fn default_max_iterations() -> usize {
    DEFAULT_MAX_ITERATIONS
}

impl SolveConfig {
    pub fn new(budget: f64) -> Self {
        Self {
            budget,
            tolerance: None,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            caps: None,
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = Some(tolerance);
        self
    }

    pub fn with_caps(mut self, caps: Vec<f64>) -> Self {
        self.caps = Some(caps);
        self
    }

    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn effective_tolerance(&self) -> f64 {
        self.tolerance
            .unwrap_or(DEFAULT_RELATIVE_TOLERANCE * self.budget)
    }

    pub fn validate(&self, n_phases: usize) -> Result<()> {
        if !(self.budget.is_finite() && self.budget > 0.0) {
            return Err(Error::validation("budget", format!("must be finite and > 0, got {}", self.budget)));
        }
        let tol = self.effective_tolerance();
        if !(tol.is_finite() && tol > 0.0) {
            return Err(Error::validation("tolerance", format!("must be > 0, got {tol}")));
        }
        if self.max_iterations == 0 {
            return Err(Error::validation("max_iterations", "must be positive"));
        }
        if let Some(caps) = &self.caps {
            if caps.len() != n_phases {
                return Err(Error::validation(
                    "caps",
                    format!("{} caps for {} phases", caps.len(), n_phases),
                ));
            }
            if let Some((i, u)) = caps.iter().enumerate().find(|(_, u)| u.is_nan() || **u <= 0.0) {
                return Err(Error::validation("caps", format!("cap {i} must be > 0, got {u}")));
            }
        }
        Ok(())
    }

    fn cap(&self, i: usize) -> Option<f64> {
        self.caps.as_ref().map(|c| c[i])
    }
}

/// A per-phase budget vector and the dual price that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub amounts: Vec<f64>,
    /// Optimal dual price; `Some(0.0)` when every cap binds, `None` for
    /// allocations not produced by the dual search.
    pub lambda_star: Option<f64>,
    pub objective_value: Option<f64>,
    /// `sum w_i ln g_i(x_i)` for product objectives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_objective_value: Option<f64>,
    pub budget_used: f64,
}

impl Allocation {
    /// Allocation with no dual price and no objective value yet.
    pub fn from_amounts(amounts: Vec<f64>) -> Self {
        let budget_used = amounts.iter().sum();
        Self {
            amounts,
            lambda_star: None,
            objective_value: None,
            log_objective_value: None,
            budget_used,
        }
    }

    /// Fill the objective fields by evaluating against `curves`.
    pub fn evaluated(mut self, curves: &[PhaseCurve], objective: &Objective) -> Result<Self> {
        let v = evaluate(curves, &self.amounts, objective)?;
        self.objective_value = Some(v.value);
        self.log_objective_value = v.log_value;
        Ok(self)
    }

    /// Per-phase share of `budget_used`; all zeros when nothing was spent.
    pub fn fractions(&self) -> Vec<f64> {
        if self.budget_used > 0.0 {
            self.amounts.iter().map(|x| x / self.budget_used).collect()
        } else {
            vec![0.0; self.amounts.len()]
        }
    }
}

fn check_curves(curves: &[PhaseCurve]) -> Result<()> {
    if curves.is_empty() {
        return Err(Error::validation("phases", "at least one phase is required"));
    }
    curves.iter().try_for_each(PhaseCurve::validate)
}

/// Sum of the clamped closed-form responses at price `lambda`.
pub fn total_response(
    curves: &[PhaseCurve],
    lambda: f64,
    objective: &Objective,
    caps: Option<&[f64]>,
) -> Result<f64> {
    objective.validate(curves.len())?;
    if let Some(c) = caps {
        if c.len() != curves.len() {
            return Err(Error::validation("caps", format!("{} caps for {} phases", c.len(), curves.len())));
        }
    }
    curves
        .iter()
        .enumerate()
        .map(|(i, c)| {
            objectives::phase_response(c, lambda, objective.kind, objective.weight(i), caps.map(|u| u[i]))
        })
        .sum()
}

struct Problem<'a> {
    curves: &'a [PhaseCurve],
    objective: &'a Objective,
    config: &'a SolveConfig,
}

impl Problem<'_> {
    fn response(&self, i: usize, log_lambda: f64) -> f64 {
        response_at_log_price(
            &self.curves[i],
            log_lambda,
            self.objective.kind,
            self.objective.weight(i),
            self.config.cap(i),
        )
    }

    fn amounts(&self, log_lambda: f64) -> Vec<f64> {
        (0..self.curves.len()).map(|i| self.response(i, log_lambda)).collect()
    }

    fn total(&self, log_lambda: f64) -> f64 {
        (0..self.curves.len()).map(|i| self.response(i, log_lambda)).sum()
    }

    fn log_threshold(&self, i: usize) -> f64 {
        log_starvation_threshold(&self.curves[i], self.objective.kind, self.objective.weight(i))
    }

    /// `ln(a w b)`, the log price at which the uncapped response reaches
    /// zero for additive and is a lower bound on it for product objectives.
    fn log_scale(&self, i: usize) -> f64 {
        let c = &self.curves[i];
        c.ceiling_a.ln() + c.rate_b.ln() + self.objective.weight(i).ln()
    }
}

/// Bisection on `ln lambda` until the total response is within `tol` of `budget`.
///
/// `hi` must satisfy `total(hi) <= budget` and `lo` must satisfy
/// `total(lo) >= budget`. Returns the converged log price.
pub(crate) fn dual_search(
    total: impl Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    budget: f64,
    tol: f64,
    max_iterations: usize,
) -> Result<f64> {
    for endpoint in [hi, lo] {
        if (total(endpoint) - budget).abs() <= tol {
            return Ok(endpoint);
        }
    }
    for _ in 0..max_iterations {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // Bracket exhausted at f64 resolution; S is continuous so the
            // remaining residual is rounding noise.
            return Ok(hi);
        }
        let s = total(mid);
        if (s - budget).abs() <= tol {
            return Ok(mid);
        }
        if s > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NotConverged {
        iterations: max_iterations,
        lambda_lo: lo.exp(),
        lambda_hi: hi.exp(),
        residual: total(hi) - budget,
    })
}

/// Expand `hi` upward until `total(hi) <= budget`.
pub(crate) fn raise_upper(total: &impl Fn(f64) -> f64, mut hi: f64, budget: f64) -> Result<f64> {
    for _ in 0..200 {
        if total(hi) <= budget {
            return Ok(hi);
        }
        hi += INFINITE_THRESHOLD_FACTOR.ln().max(hi.abs());
    }
    Err(Error::Domain("could not bracket the dual price from above".into()))
}

/// Expand `lo` downward until `total(lo) >= budget`.
pub(crate) fn lower_lower(total: &impl Fn(f64) -> f64, mut lo: f64, budget: f64) -> Result<f64> {
    for _ in 0..200 {
        if total(lo) >= budget {
            return Ok(lo);
        }
        lo -= 1.0f64.max(lo.abs());
    }
    Err(Error::Domain("could not bracket the dual price from below".into()))
}

/// Push `budget - sum(amounts)` onto phases by marginal order, respecting `[0, cap]`.
///
/// A positive residual goes to the highest-marginal phases first; a negative
/// one is taken from the lowest-marginal funded phases first.
pub(crate) fn settle_residual(
    amounts: &mut [f64],
    budget: f64,
    marginal: impl Fn(usize, f64) -> f64,
    cap: impl Fn(usize) -> Option<f64>,
) {
    let residual = budget - amounts.iter().sum::<f64>();
    if residual == 0.0 || !residual.is_finite() {
        return;
    }
    let mut order: Vec<usize> = (0..amounts.len()).collect();
    let key = |i: usize| marginal(i, amounts[i]);
    let keys: Vec<f64> = order.iter().map(|&i| key(i)).collect();
    order.sort_by(|&i, &j| keys[j].total_cmp(&keys[i]).then(i.cmp(&j)));
    let mut left = residual;
    if residual > 0.0 {
        for i in order {
            let room = cap(i).map_or(f64::INFINITY, |u| (u - amounts[i]).max(0.0));
            let add = left.min(room);
            amounts[i] += add;
            left -= add;
            if left <= 0.0 {
                break;
            }
        }
    } else {
        for i in order.into_iter().rev() {
            let take = (-left).min(amounts[i]);
            amounts[i] -= take;
            left += take;
            if left >= 0.0 {
                break;
            }
        }
    }
}

/// Maximize the objective subject to `sum x_i <= budget`, `0 <= x_i <= cap_i`.
pub fn solve(curves: &[PhaseCurve], objective: &Objective, config: &SolveConfig) -> Result<Allocation> {
    check_curves(curves)?;
    objective.validate(curves.len())?;
    config.validate(curves.len())?;
    let budget = config.budget;

    if let Some(caps) = &config.caps {
        if caps.iter().sum::<f64>() <= budget {
            return Allocation {
                amounts: caps.clone(),
                lambda_star: Some(0.0),
                objective_value: None,
                log_objective_value: None,
                budget_used: caps.iter().sum(),
            }
            .evaluated(curves, objective);
        }
    }

    let problem = Problem {
        curves,
        objective,
        config,
    };
    let n = curves.len();
    let total = |mu: f64| problem.total(mu);

    let finite_max = (0..n)
        .map(|i| problem.log_threshold(i))
        .filter(|t| t.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let any_infinite = (0..n).any(|i| problem.log_threshold(i).is_infinite());
    let hi = if !any_infinite {
        finite_max
    } else if finite_max.is_finite() {
        finite_max + INFINITE_THRESHOLD_FACTOR.ln()
    } else {
        (0..n).map(|i| problem.log_scale(i)).fold(f64::NEG_INFINITY, f64::max)
            + INFINITE_THRESHOLD_FACTOR.ln()
    };
    let hi = raise_upper(&total, hi, budget)?;

    // Below ln(a w b) - b min(B, u) every phase sits at min(B, u), so the total covers B.
    let lo = (0..n)
        .map(|i| {
            let reach = config.cap(i).map_or(budget, |u| u.min(budget));
            problem.log_scale(i) - curves[i].rate_b * reach
        })
        .fold(f64::INFINITY, f64::min)
        - 1.0;
    let lo = lower_lower(&total, lo.min(hi), budget)?;

    let mu = dual_search(
        total,
        lo,
        hi,
        budget,
        config.effective_tolerance(),
        config.max_iterations,
    )?;
    let mut amounts = problem.amounts(mu);
    settle_residual(
        &mut amounts,
        budget,
        |i, x| objectives::marginal(&curves[i], x, objective.kind, objective.weight(i)),
        |i| config.cap(i),
    );
    let budget_used = amounts.iter().sum();
    Allocation {
        amounts,
        lambda_star: Some(mu.exp()),
        objective_value: None,
        log_objective_value: None,
        budget_used,
    }
    .evaluated(curves, objective)
}

/// Re-solve over the remaining phases with the budget left after `spent`.
///
/// `config.budget` is the original total budget.
pub fn reallocate(
    curves_remaining: &[PhaseCurve],
    objective: &Objective,
    spent: f64,
    config: &SolveConfig,
) -> Result<Allocation> {
    check_curves(curves_remaining)?;
    objective.validate(curves_remaining.len())?;
    if spent.is_nan() || spent < 0.0 {
        return Err(Error::validation("spent", format!("must be >= 0, got {spent}")));
    }
    if spent > config.budget {
        return Err(Error::validation(
            "spent",
            format!("{spent} exceeds total budget {}", config.budget),
        ));
    }
    let remaining = config.budget - spent;
    if remaining <= 0.0 {
        return Allocation::from_amounts(vec![0.0; curves_remaining.len()]).evaluated(curves_remaining, objective);
    }
    let mut sub = config.clone();
    sub.budget = remaining;
    solve(curves_remaining, objective, &sub)
}

/// A concave separable term known only through its marginal.
pub trait SeparableTerm {
    /// Derivative of the term at `x >= 0`; positive and non-increasing.
    fn marginal(&self, x: f64) -> f64;
}

/// Maximize `sum_i term_i(x_i)` s.t. `sum x_i = budget` by dual search,
/// inverting each marginal numerically instead of using a closed form.
///
/// Returns the amounts and the dual price. Caps in `config` are ignored.
pub fn solve_separable<T: SeparableTerm + Sync>(terms: &[T], config: &SolveConfig) -> Result<(Vec<f64>, f64)> {
    if terms.is_empty() {
        return Err(Error::validation("phases", "at least one phase is required"));
    }
    config.validate(terms.len())?;
    let budget = config.budget;
    let response = |t: &T, mu: f64| numeric_response(t, mu.exp(), budget);
    let total = |mu: f64| terms.iter().map(|t| response(t, mu)).sum::<f64>();

    let hi = terms
        .iter()
        .map(|t| t.marginal(0.0).ln())
        .filter(|m| m.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let hi = if hi.is_finite() { hi } else { 0.0 };
    let hi = raise_upper(&total, hi, budget)?;
    let lo = terms
        .iter()
        .map(|t| t.marginal(budget).ln())
        .fold(f64::INFINITY, f64::min)
        - 1.0;
    let lo = lower_lower(&total, lo.min(hi), budget)?;
    let mu = dual_search(total, lo, hi, budget, config.effective_tolerance(), config.max_iterations)?;
    let mut amounts: Vec<f64> = terms.iter().map(|t| response(t, mu)).collect();
    settle_residual(&mut amounts, budget, |i, x| terms[i].marginal(x), |_| None);
    Ok((amounts, mu.exp()))
}

/// Solve `marginal(x) = lambda` on `[0, limit]`, returning 0 when the
/// marginal at zero is already at or below `lambda` and `limit` when the
/// marginal there is still above it.
fn numeric_response<T: SeparableTerm>(term: &T, lambda: f64, limit: f64) -> f64 {
    if term.marginal(0.0) <= lambda {
        return 0.0;
    }
    if term.marginal(limit) >= lambda {
        return limit;
    }
    let (mut lo, mut hi) = (0.0f64, limit);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if term.marginal(mid) > lambda {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Best allocation on the simplex grid `{k h : sum k_i = grid_points - 1}`,
/// `h = budget / (grid_points - 1)`. Test oracle only.
pub fn grid_oracle(
    curves: &[PhaseCurve],
    objective: &Objective,
    config: &SolveConfig,
    grid_points: usize,
) -> Result<Allocation> {
    grid_oracle_limited(curves, objective, config, grid_points, DEFAULT_GRID_LIMIT)
}

/// Number of points on the `n`-phase simplex grid with `steps` steps per axis.
pub fn simplex_grid_size(n_phases: usize, steps: usize) -> u128 {
    // C(steps + n - 1, n - 1)
    let k = n_phases.saturating_sub(1) as u128;
    let m = steps as u128;
    (1..=k).fold(1u128, |acc, i| acc * (m + i) / i)
}

pub fn grid_oracle_limited(
    curves: &[PhaseCurve],
    objective: &Objective,
    config: &SolveConfig,
    grid_points: usize,
    limit: u64,
) -> Result<Allocation> {
    check_curves(curves)?;
    objective.validate(curves.len())?;
    config.validate(curves.len())?;
    if grid_points < 11 {
        return Err(Error::validation("grid_points", format!("must be >= 11, got {grid_points}")));
    }
    let n = curves.len();
    let steps = grid_points - 1;
    let size = simplex_grid_size(n, steps);
    if size > u128::from(limit) {
        return Err(Error::ResourceLimit {
            requested: size,
            limit: u128::from(limit),
        });
    }
    let h = config.budget / steps as f64;

    // table[i][k]: separable score of phase i at k steps (sum of f, or sum of w ln g).
    let table: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..=steps)
                .map(|k| {
                    let x = k as f64 * h;
                    if config.cap(i).is_some_and(|u| x > u) {
                        return f64::NEG_INFINITY;
                    }
                    let c = &curves[i];
                    match objective.kind {
                        ObjectiveKind::Additive => c.f_unchecked(x),
                        _ => objective.weight(i) * c.ln_g_unchecked(x),
                    }
                })
                .collect()
        })
        .collect();

    let best = (0..=steps)
        .into_par_iter()
        .map(|k0| {
            let mut ks = vec![0usize; n];
            ks[0] = k0;
            let mut best = (f64::NEG_INFINITY, Vec::new());
            if n == 1 {
                if k0 == steps {
                    best = (table[0][k0], ks);
                }
                return best;
            }
            enumerate_rest(&table, 1, steps - k0, table[0][k0], &mut ks, &mut best);
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((f64::NEG_INFINITY, Vec::new()), |acc, cand| {
            if cand.0 > acc.0 || (acc.1.is_empty() && !cand.1.is_empty()) {
                cand
            } else {
                acc
            }
        });

    if best.1.is_empty() {
        return Err(Error::validation("caps", "no grid point satisfies the caps"));
    }
    let amounts = best.1.iter().map(|&k| k as f64 * h).collect();
    Allocation::from_amounts(amounts).evaluated(curves, objective)
}

fn enumerate_rest(
    table: &[Vec<f64>],
    phase: usize,
    remaining: usize,
    partial: f64,
    ks: &mut [usize],
    best: &mut (f64, Vec<usize>),
) {
    if phase == table.len() - 1 {
        ks[phase] = remaining;
        let score = partial + table[phase][remaining];
        if score > best.0 || (best.1.is_empty() && score > f64::NEG_INFINITY) {
            *best = (score, ks.to_vec());
        }
        return;
    }
    for k in 0..=remaining {
        ks[phase] = k;
        enumerate_rest(table, phase + 1, remaining - k, partial + table[phase][k], ks, best);
    }
}

/// Upper bound on `optimum - grid optimum` for the uncapped problem.
///
/// Some grid point lies within one step `h` of the optimum in every
/// coordinate, so the gap is at most `h * sum_i L_i` with `L_i` a bound on
/// the objective's partial derivative in phase `i`: `a b` for `Additive`
/// and `MultOffset` (every `g_j <= 1`), `w a b (1-a)^(w-1)` when `w < 1`
/// under `PropOffset`.
pub fn grid_gap_bound(curves: &[PhaseCurve], objective: &Objective, budget: f64, grid_points: usize) -> f64 {
    let h = budget / (grid_points.max(2) - 1) as f64;
    let lipschitz: f64 = curves
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let ab = c.ceiling_a * c.rate_b;
            match objective.kind {
                ObjectiveKind::Additive | ObjectiveKind::MultOffset => ab,
                ObjectiveKind::PropOffset => {
                    let w = objective.weight(i);
                    if w >= 1.0 {
                        w * ab
                    } else {
                        w * ab * (1.0 - c.ceiling_a).powf(w - 1.0)
                    }
                }
            }
        })
        .sum();
    h * lipschitz
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn curve(a: f64, b: f64) -> PhaseCurve {
        PhaseCurve::new("p", a, b).unwrap()
    }

    fn walkthrough() -> Vec<PhaseCurve> {
        vec![
            PhaseCurve::new("plan", 0.8, 4963.0).unwrap(),
            PhaseCurve::new("decompose", 0.7, 3722.0).unwrap(),
            PhaseCurve::new("implement", 0.9, 1922.0).unwrap(),
            PhaseCurve::new("refine", 0.6, 148.6).unwrap(),
        ]
    }

    const B: f64 = 0.017951;

    #[test]
    fn walkthrough_additive() {
        let a = solve(&walkthrough(), &Objective::additive(), &SolveConfig::new(B)).unwrap();
        let expect = [0.001150, 0.001420, 0.002537, 0.012844];
        for (x, e) in a.amounts.iter().zip(expect) {
            assert!((x - e).abs() <= 2e-5, "{x} vs {e}");
        }
        assert!((a.budget_used - B).abs() <= 1e-9 * B);
    }

    #[test]
    fn walkthrough_mult_offset() {
        let a = solve(&walkthrough(), &Objective::mult_offset(), &SolveConfig::new(B)).unwrap();
        let expect = [0.001134, 0.001399, 0.002499, 0.012919];
        for (x, e) in a.amounts.iter().zip(expect) {
            assert!((x - e).abs() <= 2e-5, "{x} vs {e}");
        }
    }

    #[test]
    fn total_response_edges() {
        let cs = walkthrough();
        let obj = Objective::additive();
        assert_eq!(total_response(&cs, 3970.4 * 1.01, &obj, None).unwrap(), 0.0);
        let c = curve(0.8, 50.0);
        let budget = 0.03;
        let lambda = 0.8 * 50.0 * (-50.0f64 * budget).exp();
        let s = total_response(std::slice::from_ref(&c), lambda, &obj, None).unwrap();
        assert_relative_eq!(s, budget, max_relative = 1e-12);
        let two = total_response(&[c.clone(), c.clone()], lambda, &obj, None).unwrap();
        assert_relative_eq!(two, 2.0 * s, max_relative = 1e-15);
    }

    #[test]
    fn single_phase_takes_everything() {
        for obj in [Objective::additive(), Objective::mult_offset(), Objective::prop_offset(vec![0.4]).unwrap()] {
            let a = solve(&[curve(0.4, 30.0)], &obj, &SolveConfig::new(0.2)).unwrap();
            assert_relative_eq!(a.amounts[0], 0.2, max_relative = 1e-12);
        }
    }

    #[test]
    fn identical_phases_split_evenly() {
        let cs = vec![curve(0.7, 20.0); 5];
        for obj in [Objective::additive(), Objective::mult_offset()] {
            let a = solve(&cs, &obj, &SolveConfig::new(1.0)).unwrap();
            for x in &a.amounts {
                assert!((x - 0.2).abs() < 1e-9, "{x}");
            }
        }
    }

    #[test]
    fn starved_second_phase() {
        let cs = vec![curve(0.9, 100.0), curve(0.1, 1.0)];
        let a = solve(&cs, &Objective::additive(), &SolveConfig::new(0.01)).unwrap();
        assert_eq!(a.amounts[1], 0.0);
        assert_relative_eq!(a.amounts[0], 0.01, max_relative = 1e-12);
        let g = grid_oracle(&cs, &Objective::additive(), &SolveConfig::new(0.01), 101).unwrap();
        assert_eq!(g.amounts[1], 0.0);
    }

    #[test]
    fn caps_bind() {
        let cs = walkthrough();
        let cfg = SolveConfig::new(B).with_caps(vec![1.0, 1.0, 1.0, 0.008]);
        let a = solve(&cs, &Objective::additive(), &cfg).unwrap();
        assert!(a.amounts[3] <= 0.008 + 1e-15);
        assert!((a.budget_used - B).abs() <= 1e-9 * B);
        // With refine capped the others absorb the rest at a common marginal.
        let lam = a.lambda_star.unwrap();
        for (c, x) in cs.iter().zip(&a.amounts).take(3) {
            assert_relative_eq!(c.f_prime(*x).unwrap(), lam, max_relative = 1e-6);
        }
    }

    #[test]
    fn caps_below_budget_fill_every_cap() {
        let cs = walkthrough();
        let cfg = SolveConfig::new(B).with_caps(vec![0.001, 0.001, 0.001, 0.001]);
        let a = solve(&cs, &Objective::mult_offset(), &cfg).unwrap();
        assert_eq!(a.amounts, vec![0.001; 4]);
        assert_eq!(a.lambda_star, Some(0.0));
        assert_relative_eq!(a.budget_used, 0.004, max_relative = 1e-15);
    }

    #[test]
    fn validation_errors() {
        assert!(solve(&[], &Objective::additive(), &SolveConfig::new(1.0)).is_err());
        assert!(solve(&walkthrough(), &Objective::additive(), &SolveConfig::new(0.0)).is_err());
        assert!(solve(&walkthrough(), &Objective::additive(), &SolveConfig::new(1.0).with_caps(vec![1.0])).is_err());
        assert!(solve(&walkthrough(), &Objective::additive(), &SolveConfig::new(1.0).with_tolerance(0.0)).is_err());
    }

    #[test]
    fn non_convergence_reports_bracket() {
        let err = solve(
            &walkthrough(),
            &Objective::additive(),
            &SolveConfig::new(B).with_max_iterations(2).with_tolerance(1e-300),
        )
        .unwrap_err();
        match err {
            Error::NotConverged { lambda_lo, lambda_hi, .. } => assert!(lambda_lo < lambda_hi),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn extreme_rate_budget_products_still_bracket() {
        // b * B far beyond the f64 exponent range of lambda itself.
        let cs = vec![curve(0.9, 1e6), curve(0.5, 2e6)];
        let a = solve(&cs, &Objective::additive(), &SolveConfig::new(10.0)).unwrap();
        assert_relative_eq!(a.budget_used, 10.0, max_relative = 1e-9);
        let a = solve(&cs, &Objective::mult_offset(), &SolveConfig::new(10.0)).unwrap();
        assert_relative_eq!(a.budget_used, 10.0, max_relative = 1e-9);
    }

    #[test]
    fn full_ceiling_phases_always_funded() {
        let cs = vec![curve(1.0, 10.0), curve(0.2, 1000.0), curve(1.0, 1.0)];
        let a = solve(&cs, &Objective::mult_offset(), &SolveConfig::new(0.05)).unwrap();
        assert!(a.amounts[0] > 0.0 && a.amounts[2] > 0.0);
        let all_full = vec![curve(1.0, 10.0), curve(1.0, 20.0)];
        let a = solve(&all_full, &Objective::mult_offset(), &SolveConfig::new(0.5)).unwrap();
        assert!(a.amounts.iter().all(|&x| x > 0.0));
        assert_relative_eq!(a.budget_used, 0.5, max_relative = 1e-9);
    }

    #[test]
    fn reallocate_edges() {
        let cs = walkthrough();
        let obj = Objective::additive();
        let cfg = SolveConfig::new(B);
        let full = solve(&cs, &obj, &cfg).unwrap();
        let zero_spent = reallocate(&cs, &obj, 0.0, &cfg).unwrap();
        assert_eq!(full.amounts, zero_spent.amounts);
        let all_spent = reallocate(&cs, &obj, B, &cfg).unwrap();
        assert_eq!(all_spent.amounts, vec![0.0; 4]);
        assert!(reallocate(&cs, &obj, B * 1.01, &cfg).is_err());
        assert!(reallocate(&[], &obj, 0.0, &cfg).is_err());
    }

    #[test]
    fn reallocate_after_upstream_spend_satisfies_kkt() {
        let cs = walkthrough();
        let obj = Objective::additive();
        let cfg = SolveConfig::new(B);
        let one_shot = solve(&cs, &obj, &cfg).unwrap();
        let spent = one_shot.amounts[0] + one_shot.amounts[1];
        let rest = reallocate(&cs[2..], &obj, spent, &cfg).unwrap();
        assert_relative_eq!(rest.budget_used, B - spent, max_relative = 1e-9);
        let m0 = cs[2].f_prime(rest.amounts[0]).unwrap();
        let m1 = cs[3].f_prime(rest.amounts[1]).unwrap();
        assert_relative_eq!(m0, m1, max_relative = 1e-6);
        let grid = grid_oracle(&cs[2..], &obj, &SolveConfig::new(B - spent), 2001).unwrap();
        assert!(rest.objective_value.unwrap() >= grid.objective_value.unwrap());
    }

    #[test]
    fn grid_oracle_basics() {
        let single = grid_oracle(&[curve(0.5, 3.0)], &Objective::additive(), &SolveConfig::new(0.7), 11).unwrap();
        assert_relative_eq!(single.amounts[0], 0.7, max_relative = 1e-15);
        let twins = vec![curve(0.5, 3.0), curve(0.5, 3.0)];
        let g = grid_oracle(&twins, &Objective::mult_offset(), &SolveConfig::new(1.0), 101).unwrap();
        assert_relative_eq!(g.amounts[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(g.amounts[1], 0.5, max_relative = 1e-12);
        let err = grid_oracle_limited(&walkthrough(), &Objective::additive(), &SolveConfig::new(B), 201, 1000).unwrap_err();
        assert!(matches!(err, Error::ResourceLimit { .. }));
        assert!(grid_oracle(&twins, &Objective::additive(), &SolveConfig::new(1.0), 10).is_err());
    }

    #[test]
    fn grid_oracle_below_solver_on_walkthrough() {
        let cs = walkthrough();
        let obj = Objective::additive();
        let cfg = SolveConfig::new(B);
        let s = solve(&cs, &obj, &cfg).unwrap().objective_value.unwrap();
        let g = grid_oracle(&cs, &obj, &cfg, 201).unwrap().objective_value.unwrap();
        assert!(s >= g);
        assert!(s - g <= grid_gap_bound(&cs, &obj, B, 201));
    }

    #[test]
    fn grid_gap_shrinks_with_resolution() {
        let cs = vec![curve(0.8, 30.0), curve(0.6, 12.0), curve(0.9, 5.0)];
        let obj = Objective::mult_offset();
        let cfg = SolveConfig::new(0.4);
        let s = solve(&cs, &obj, &cfg).unwrap().objective_value.unwrap();
        let coarse = s - grid_oracle(&cs, &obj, &cfg, 21).unwrap().objective_value.unwrap();
        let fine = s - grid_oracle(&cs, &obj, &cfg, 401).unwrap().objective_value.unwrap();
        assert!(fine >= -1e-15 && fine <= coarse);
        assert!(fine < 1e-5);
    }

    #[test]
    fn grid_size_formula() {
        assert_eq!(simplex_grid_size(1, 100), 1);
        assert_eq!(simplex_grid_size(2, 100), 101);
        assert_eq!(simplex_grid_size(4, 100), 176_851);
    }

    fn arb_curve() -> impl Strategy<Value = PhaseCurve> {
        (0.05f64..0.99, 1.0f64..500.0).prop_map(|(a, b)| curve(a, b))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn dominates_random_feasible_allocations(
            cs in prop::collection::vec(arb_curve(), 2..6),
            budget in 1e-3f64..0.5,
            raw in prop::collection::vec(0.0f64..1.0, 6),
            kind in prop_oneof![Just(ObjectiveKind::Additive), Just(ObjectiveKind::MultOffset), Just(ObjectiveKind::PropOffset)],
        ) {
            let obj = Objective::for_curves(kind, &cs);
            let a = solve(&cs, &obj, &SolveConfig::new(budget)).unwrap();
            prop_assert!(a.budget_used <= budget * (1.0 + 1e-9));
            let w = &raw[..cs.len()];
            let total: f64 = w.iter().sum();
            prop_assume!(total > 0.0);
            let y: Vec<f64> = w.iter().map(|v| v / total * budget).collect();
            let vy = evaluate(&cs, &y, &obj).unwrap().value;
            prop_assert!(a.objective_value.unwrap() >= vy - 1e-9);
            let uniform = vec![budget / cs.len() as f64; cs.len()];
            let vu = evaluate(&cs, &uniform, &obj).unwrap().value;
            prop_assert!(a.objective_value.unwrap() >= vu - 1e-9);
        }

        #[test]
        fn dual_monotone(cs in prop::collection::vec(arb_curve(), 1..6), l in -5.0f64..8.0, dl in 0.0f64..3.0) {
            for obj in [Objective::additive(), Objective::mult_offset()] {
                let s1 = total_response(&cs, l.exp(), &obj, None).unwrap();
                let s2 = total_response(&cs, (l + dl).exp(), &obj, None).unwrap();
                prop_assert!(s1 >= s2);
            }
        }

        #[test]
        fn currency_invariance(
            cs in prop::collection::vec(arb_curve(), 1..5), budget in 1e-3f64..0.5, scale in 1e-3f64..1e3,
        ) {
            for kind in [ObjectiveKind::Additive, ObjectiveKind::MultOffset] {
                let obj = Objective::for_curves(kind, &cs);
                let base = solve(&cs, &obj, &SolveConfig::new(budget)).unwrap();
                let scaled_curves: Vec<PhaseCurve> = cs
                    .iter()
                    .map(|c| curve(c.ceiling_a, c.rate_b / scale))
                    .collect();
                let scaled = solve(&scaled_curves, &obj, &SolveConfig::new(budget * scale)).unwrap();
                for (x, y) in base.amounts.iter().zip(&scaled.amounts) {
                    prop_assert!((x * scale - y).abs() <= 1e-7 * budget * scale, "{} vs {}", x * scale, y);
                }
                let (v0, v1) = (base.objective_value.unwrap(), scaled.objective_value.unwrap());
                prop_assert!((v0 - v1).abs() <= 1e-9 * v0.abs().max(1e-12));
            }
        }

        #[test]
        fn interior_phases_satisfy_kkt(
            cs in prop::collection::vec(arb_curve(), 1..6), budget in 1e-3f64..0.5,
        ) {
            for kind in [ObjectiveKind::Additive, ObjectiveKind::MultOffset, ObjectiveKind::PropOffset] {
                let obj = Objective::for_curves(kind, &cs);
                let a = solve(&cs, &obj, &SolveConfig::new(budget)).unwrap();
                let lam = a.lambda_star.unwrap();
                for (i, (c, &x)) in cs.iter().zip(&a.amounts).enumerate() {
                    let m = objectives::marginal(c, x, kind, obj.weight(i));
                    if x > 0.0 {
                        prop_assert!((m - lam).abs() <= 1e-6 * lam, "{:?} m={} lam={}", kind, m, lam);
                    } else {
                        prop_assert!(m <= lam * (1.0 + 1e-9));
                    }
                }
            }
        }
    }
}
