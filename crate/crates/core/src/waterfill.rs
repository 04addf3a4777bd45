//! Exact solver for the separable concave exposure program
//!
//! ```text
//! maximize   sum_i a_i * g(e_i; t)      g(e; t) = e^(1-t) / (1-t),  or ln(e) at t = 1
//! subject to sum_i e_i = k,  eps <= e_i <= 1
//! ```
//!
//! The KKT conditions say every coordinate strictly inside its box has the
//! same marginal value `a_i * e_i^(-t) = nu`, so `e_i(nu) = clamp((a_i/nu)^(1/t), eps, 1)`.
//! `sum_i e_i(nu)` is monotone in `nu`; bisection on `ln nu` finds the level.

use crate::error::{Error, Result};
use crate::types::{ExposureVector, RankingConfig, ScoreMatrix};

/// Lower floor on every exposure, replacing the open constraint `e_i > 0`.
pub const EPSILON: f64 = 1e-9;

/// Tax rates within this distance of 1 use the logarithmic objective.
pub const LOG_BRANCH_WIDTH: f64 = 1e-9;

const MAX_BISECTIONS: usize = 200;
const SUM_TOLERANCE: f64 = 1e-10;

/// Coefficients `a_i = gamma_i * eta_i` of the exposure program.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerBoundProblem {
    a: Vec<f64>,
    k: usize,
    tax_rate: f64,
}

impl LowerBoundProblem {
    pub fn new(a: Vec<f64>, k: usize, tax_rate: f64) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::InvalidInput("no items".into()));
        }
        if k == 0 || k > a.len() {
            return Err(Error::InvalidInput(format!(
                "list size k = {k} must lie in 1..={}",
                a.len()
            )));
        }
        if !(tax_rate >= 0.0) || !tax_rate.is_finite() {
            return Err(Error::InvalidInput(format!(
                "tax rate must be finite and nonnegative, got {tax_rate}"
            )));
        }
        if let Some((i, &x)) = a
            .iter()
            .enumerate()
            .find(|(_, x)| !x.is_finite() || **x < 0.0)
        {
            return Err(Error::InvalidInput(format!(
                "coefficient a[{i}] = {x} must be finite and nonnegative"
            )));
        }
        if a.iter().all(|&x| x == 0.0) {
            return Err(Error::DegenerateProblem);
        }
        Ok(Self { a, k, tax_rate })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.a
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tax_rate(&self) -> f64 {
        self.tax_rate
    }

    /// Items with zero column mass; the objective ignores them and they sit at the floor.
    pub fn pinned(&self) -> Vec<bool> {
        self.a.iter().map(|&x| x == 0.0).collect()
    }

    pub fn is_log_branch(&self) -> bool {
        (self.tax_rate - 1.0).abs() < LOG_BRANCH_WIDTH
    }

    /// Objective value at `e`. Pinned items contribute nothing.
    pub fn objective(&self, e: &[f64]) -> f64 {
        let t = self.tax_rate;
        let log_branch = self.is_log_branch();
        self.a
            .iter()
            .zip(e)
            .filter(|(a, _)| **a > 0.0)
            .map(|(&a, &x)| {
                if log_branch {
                    a * x.ln()
                } else {
                    a * x.powf(1.0 - t) / (1.0 - t)
                }
            })
            .sum()
    }
}

/// Builds the program from a score matrix with `tau = 1 / |U|`, so
/// `a_i = gamma_i * mean_u w[u, i]`.
pub fn build_problem(scores: &ScoreMatrix, config: &RankingConfig) -> Result<LowerBoundProblem> {
    config.validate(scores.num_items())?;
    let tau = 1.0 / scores.num_users() as f64;
    let a: Vec<f64> = scores
        .w()
        .columns()
        .into_iter()
        .zip(scores.gamma())
        .map(|(col, g)| g * tau * col.sum())
        .collect();
    LowerBoundProblem::new(a, config.k, config.tax_rate)
}

/// Returns the maximizer of the exposure program.
pub fn solve(problem: &LowerBoundProblem) -> Result<ExposureVector> {
    let e = if problem.tax_rate == 0.0 {
        solve_linear(problem)
    } else {
        solve_power(problem)?
    };
    ExposureVector::new(e, problem.k)
}

/// `t = 0`: the objective is linear, so the top-`k` coefficients take the
/// whole box and everything else sits on the floor. The last selected item
/// gives up the floor mass so the total stays exactly `k`.
fn solve_linear(problem: &LowerBoundProblem) -> Vec<f64> {
    let n = problem.a.len();
    let k = problem.k;
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lowest index first among ties
    order.sort_by(|&i, &j| problem.a[j].total_cmp(&problem.a[i]));
    let mut e = vec![EPSILON; n];
    for &i in &order[..k] {
        e[i] = 1.0;
    }
    e[order[k - 1]] -= (n - k) as f64 * EPSILON;
    e
}

fn solve_power(problem: &LowerBoundProblem) -> Result<Vec<f64>> {
    let n = problem.a.len();
    let t = if problem.is_log_branch() {
        1.0
    } else {
        problem.tax_rate
    };
    let free: Vec<usize> = (0..n).filter(|&i| problem.a[i] > 0.0).collect();
    let pinned = n - free.len();
    let target = problem.k as f64 - pinned as f64 * EPSILON;

    let mut e = vec![EPSILON; n];
    if free.len() as f64 <= target {
        // not enough positive items to absorb k: fill them, spread the rest
        // over the zero-coefficient items (the objective is indifferent there)
        for &i in &free {
            e[i] = 1.0;
        }
        let rest = (problem.k - free.len()) as f64 / pinned as f64;
        for (i, x) in e.iter_mut().enumerate() {
            if problem.a[i] == 0.0 {
                *x = rest;
            }
        }
        return Ok(e);
    }

    let log_a: Vec<f64> = free.iter().map(|&i| problem.a[i].ln()).collect();
    let log_eps = EPSILON.ln();
    let level = |log_nu: f64, i: usize| ((log_a[i] - log_nu) / t).clamp(log_eps, 0.0).exp();
    let total = |log_nu: f64| (0..free.len()).map(|i| level(log_nu, i)).sum::<f64>();

    let min_log_a = log_a.iter().copied().fold(f64::INFINITY, f64::min);
    let max_log_a = log_a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // at lo every free item is at 1, at hi every free item is at the floor
    let mut lo = min_log_a + 1e-12f64.ln();
    let mut hi = max_log_a - t * log_eps;
    if !(total(lo) >= target && total(hi) <= target) {
        return Err(Error::Internal(format!(
            "water level bracket [{lo}, {hi}] does not contain the target {target}"
        )));
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let s = total(mid);
        if (s - target).abs() <= SUM_TOLERANCE * 1e-2 {
            lo = mid;
            hi = mid;
            break;
        }
        if s > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let log_nu = 0.5 * (lo + hi);
    for (slot, &i) in free.iter().enumerate() {
        e[i] = level(log_nu, slot);
    }

    // Spread the leftover bisection residual over interior coordinates in
    // proportion to their size, which is the first-order change of the level.
    let residual = target - free.iter().map(|&i| e[i]).sum::<f64>();
    let interior: f64 = free
        .iter()
        .map(|&i| e[i])
        .filter(|&x| x > EPSILON && x < 1.0)
        .sum();
    if residual != 0.0 && interior > 0.0 {
        for &i in &free {
            if e[i] > EPSILON && e[i] < 1.0 {
                e[i] = (e[i] + residual * e[i] / interior).clamp(EPSILON, 1.0);
            }
        }
    }
    let sum: f64 = e.iter().sum();
    if (sum - problem.k as f64).abs() > SUM_TOLERANCE {
        return Err(Error::Internal(format!(
            "water-filling total {sum} misses k = {} beyond tolerance",
            problem.k
        )));
    }
    Ok(e)
}
