#![allow(dead_code)]

use rand::Rng;
use taxrank::waterfill::{LowerBoundProblem, EPSILON};

/// Projection onto `{sum e = k, lo <= e <= 1}` by bisection on the shift.
pub fn project_capped_simplex(y: &[f64], k: f64, lo: f64) -> Vec<f64> {
    let total = |theta: f64| -> f64 { y.iter().map(|v| (v - theta).clamp(lo, 1.0)).sum() };
    let mut low = y.iter().cloned().fold(f64::INFINITY, f64::min) - 2.0;
    let mut high = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 2.0;
    for _ in 0..200 {
        let mid = 0.5 * (low + high);
        if total(mid) > k {
            low = mid;
        } else {
            high = mid;
        }
    }
    let theta = 0.5 * (low + high);
    y.iter().map(|v| (v - theta).clamp(lo, 1.0)).collect()
}

fn gradient(a: &[f64], t: f64, e: &[f64]) -> Vec<f64> {
    a.iter().zip(e).map(|(a, e)| a * e.powf(-t)).collect()
}

/// Projected gradient ascent with backtracking, started at the uniform point.
pub fn projected_gradient(problem: &LowerBoundProblem, iterations: usize) -> Vec<f64> {
    let a = problem.coefficients();
    let t = problem.tax_rate();
    let k = problem.k() as f64;
    let n = a.len();
    let mut e = vec![k / n as f64; n];
    let mut f = problem.objective(&e);
    let mut step = 1.0;
    for _ in 0..iterations {
        let g = gradient(a, t, &e);
        let mut accepted = false;
        for _ in 0..60 {
            let y: Vec<f64> = e.iter().zip(&g).map(|(x, d)| x + step * d).collect();
            let cand = project_capped_simplex(&y, k, EPSILON);
            let fc = problem.objective(&cand);
            if fc > f {
                e = cand;
                f = fc;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    e
}

/// Relative KKT violation of `e` for the exposure program: interior
/// coordinates share one marginal value `nu`, coordinates at the cap have
/// marginal value at least `nu`, coordinates at the floor at most `nu`.
pub fn kkt_residual(problem: &LowerBoundProblem, e: &[f64]) -> f64 {
    let a = problem.coefficients();
    let g = gradient(a, problem.tax_rate(), e);
    let at_cap = |x: f64| x >= 1.0 - 1e-12;
    let at_floor = |x: f64| x <= EPSILON * (1.0 + 1e-9);
    let interior: Vec<f64> = e
        .iter()
        .zip(&g)
        .filter(|(x, _)| !at_cap(**x) && !at_floor(**x))
        .map(|(_, g)| *g)
        .collect();
    let nu = if interior.is_empty() {
        // any nu between the floor and cap values works; take the best case
        let cap_min = e
            .iter()
            .zip(&g)
            .filter(|(x, _)| at_cap(**x))
            .map(|(_, g)| *g)
            .fold(f64::INFINITY, f64::min);
        let floor_max = e
            .iter()
            .zip(&g)
            .filter(|(x, _)| at_floor(**x))
            .map(|(_, g)| *g)
            .fold(0.0, f64::max);
        if cap_min.is_finite() && cap_min >= floor_max {
            return 0.0;
        }
        0.5 * (cap_min + floor_max)
    } else {
        interior.iter().sum::<f64>() / interior.len() as f64
    };
    let mut worst = 0.0f64;
    for ((x, gi), ai) in e.iter().zip(&g).zip(a) {
        if *ai == 0.0 {
            continue;
        }
        let r = if at_cap(*x) {
            (nu - gi).max(0.0)
        } else if at_floor(*x) {
            (gi - nu).max(0.0)
        } else {
            (gi - nu).abs()
        };
        worst = worst.max(r / nu);
    }
    worst
}

/// Gini by the O(n^2) mean absolute difference.
pub fn naive_gini(s: &[f64]) -> f64 {
    let n = s.len() as f64;
    let total: f64 = s.iter().sum();
    let mut acc = 0.0;
    for x in s {
        for y in s {
            acc += (x - y).abs();
        }
    }
    acc / (2.0 * n * total)
}

/// `1 - 2 * area` under the Lorenz polyline.
pub fn lorenz_gini(points: &[(f64, f64)]) -> f64 {
    let area: f64 = points
        .windows(2)
        .map(|p| (p[1].0 - p[0].0) * (p[0].1 + p[1].1) / 2.0)
        .sum();
    1.0 - 2.0 * area
}

/// Random row with entries in `[0, 1]` summing to `k`, some of them at 1.
pub fn random_row<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(2) + 1e-3).collect();
    let mut capped = vec![false; n];
    loop {
        let free_mass: f64 = raw
            .iter()
            .zip(&capped)
            .filter(|(_, c)| !**c)
            .map(|(v, _)| v)
            .sum();
        let slots = k as f64 - capped.iter().filter(|c| **c).count() as f64;
        let s = slots / free_mass;
        let mut changed = false;
        for i in 0..n {
            if !capped[i] && raw[i] * s >= 1.0 {
                capped[i] = true;
                changed = true;
            }
        }
        if !changed {
            return raw
                .iter()
                .zip(&capped)
                .map(|(v, c)| if *c { 1.0 } else { v * s })
                .collect();
        }
    }
}
