//! Entropic optimal-transport projection of an exposure vector onto per-user
//! ranking probabilities.
//!
//! The plan has the form `x = min(1, diag(m) * B * diag(n))` with kernel
//! `B[u, i] = exp(C[u, i] / lambda_ot)` and `C[u, i] = gamma_i * w[u, i]`.
//! Rows are scaled to sum to `k`, columns to `|U| * e[i]`. Each scaling
//! update solves `sum min(1, s * b) = target` exactly, so entries never
//! exceed 1; when no entry reaches the cap this is plain Sinkhorn scaling.
//! Every update leaves its own marginal exact and cannot increase the L1
//! error of the other one. Columns with `e = 1` are fixed at 1 and left out.
//! When the error stops halving quickly, Newton steps on the dual take
//! over; if those fail too, the scaling runs its full [`MAX_ITERATIONS`].
//!
//! The kernel is shifted by each row's maximum score before exponentiation.
//! The shift is absorbed by `m` and does not change the plan.

use log::{debug, warn};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{ExposureVector, RankingConfig, RankingProbabilities, ScoreMatrix};

/// Iteration cap.
pub const MAX_ITERATIONS: usize = 1000;
/// Newton steps allowed after scaling stalls.
pub const MAX_NEWTON_STEPS: usize = 50;
/// L1 marginal error at which the iteration stops.
pub const TOLERANCE: f64 = 1e-6;
/// Errors above this after [`MAX_ITERATIONS`] are reported as failures.
pub const FAILURE_THRESHOLD: f64 = 1e-3;
/// Clamped mass (relative to `k * |U|`) above which a warning is logged.
pub const CLAMP_WARNING: f64 = 1e-3;

const STALL_WINDOW: usize = 20;
const STALL_RATIO: f64 = 0.5;
const SCALE_MIN: f64 = 1e-300;
const SCALE_MAX: f64 = 1e300;

/// Final scalings and diagnostics of one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornState {
    /// Row scalings (their logarithms when `log_domain` is set).
    pub m: Vec<f64>,
    /// Column scalings (their logarithms when `log_domain` is set).
    pub n: Vec<f64>,
    pub log_domain: bool,
    pub iterations_run: usize,
    /// `max(row L1 error, column L1 error)` of the returned plan.
    pub marginal_error: f64,
    /// Row-marginal L1 error after every full iteration.
    pub error_history: Vec<f64>,
    /// Newton steps taken after the scaling iterations (0 if not needed).
    pub newton_steps: usize,
    /// Total mass removed by the final clamp to 1 (rounding only).
    pub clamped_mass: f64,
}

/// Projects `e_star` onto ranking probabilities.
pub fn project(
    scores: &ScoreMatrix,
    e_star: &ExposureVector,
    config: &RankingConfig,
) -> Result<RankingProbabilities> {
    project_with_state(scores, e_star, config).map(|(p, _)| p)
}

/// Same as [`project`], also returning the solver state.
pub fn project_with_state(
    scores: &ScoreMatrix,
    e_star: &ExposureVector,
    config: &RankingConfig,
) -> Result<(RankingProbabilities, SinkhornState)> {
    config.validate(scores.num_items())?;
    if e_star.len() != scores.num_items() {
        return Err(Error::DimensionMismatch {
            axis: "items",
            expected: scores.num_items(),
            found: e_star.len(),
        });
    }
    if e_star.k() != config.k {
        return Err(Error::InvalidInput(format!(
            "exposure vector sums to {} but k = {}",
            e_star.k(),
            config.k
        )));
    }
    let problem = Marginals::new(scores, e_star, config);
    let (reduced, mut state) = solve_reduced(&problem);
    if state.marginal_error >= TOLERANCE {
        if state.marginal_error > FAILURE_THRESHOLD || !state.marginal_error.is_finite() {
            return Err(Error::NonConvergence {
                iterations: state.iterations_run,
                residual: state.marginal_error,
            });
        }
        warn!(
            "sinkhorn stopped at marginal error {:e} after {} iterations",
            state.marginal_error, state.iterations_run
        );
    }
    let mut x = problem.expand(&reduced, &mut state);

    let mut clamped = 0.0;
    x.mapv_inplace(|v| {
        if v > 1.0 {
            clamped += v - 1.0;
            1.0
        } else {
            v
        }
    });
    state.clamped_mass = clamped;
    let total = (config.k * scores.num_users()) as f64;
    if clamped > CLAMP_WARNING * total {
        warn!("clamped {clamped:.6} of {total} probability mass to 1; consider a larger lambda_ot");
    } else if clamped > 0.0 {
        debug!("clamped {clamped:e} probability mass to 1");
    }

    Ok((RankingProbabilities::new(x, config.k)?, state))
}

/// Score captured by the plan, `sum_{u,i} x[u, i] * gamma_i * w[u, i]`.
pub fn transport_cost(x: &RankingProbabilities, scores: &ScoreMatrix) -> Result<f64> {
    if x.num_users() != scores.num_users() {
        return Err(Error::DimensionMismatch {
            axis: "users",
            expected: scores.num_users(),
            found: x.num_users(),
        });
    }
    if x.num_items() != scores.num_items() {
        return Err(Error::DimensionMismatch {
            axis: "items",
            expected: scores.num_items(),
            found: x.num_items(),
        });
    }
    let gamma = scores.gamma();
    Ok(x.matrix()
        .rows()
        .into_iter()
        .zip(scores.w().rows())
        .map(|(xr, wr)| {
            xr.iter()
                .zip(wr)
                .zip(gamma)
                .map(|((x, w), g)| x * g * w)
                .sum::<f64>()
        })
        .sum())
}

/// `sum x ln x` over the plan (zero entries contribute 0).
pub fn entropy(x: &RankingProbabilities) -> f64 {
    x.matrix()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum()
}

/// Scaling iterations, then Newton steps if they stall, on the columns
/// with fractional exposure.
fn solve_reduced(problem: &Marginals) -> (Array2<f64>, SinkhornState) {
    if problem.active.is_empty() || problem.row_target <= 0.0 {
        let x = Array2::zeros((problem.num_users, problem.active.len()));
        let state = finish(
            problem,
            &x,
            vec![1.0; problem.num_users],
            Vec::new(),
            false,
            0,
            Vec::new(),
        );
        return (x, state);
    }
    let scale = |stop_on_stall: bool| match linear_domain(problem, stop_on_stall) {
        Some(done) => done,
        None => {
            debug!("sinkhorn scalings left [1e-300, 1e300]; restarting in log domain");
            log_domain(problem, stop_on_stall)
        }
    };
    let polish = |(x, state): (Array2<f64>, SinkhornState)| {
        if state.marginal_error < TOLERANCE || !state.marginal_error.is_finite() {
            return (x, state);
        }
        debug!(
            "scaling stopped at marginal error {:e}; switching to newton steps",
            state.marginal_error
        );
        let (nx, nstate) = newton(problem, &state);
        if nstate.marginal_error < state.marginal_error {
            (nx, nstate)
        } else {
            (x, state)
        }
    };
    let fast = polish(scale(true));
    if fast.1.marginal_error < TOLERANCE {
        return fast;
    }
    debug!("newton steps did not converge; rerunning the full scaling budget");
    let slow = polish(scale(false));
    if slow.1.marginal_error < fast.1.marginal_error {
        slow
    } else {
        fast
    }
}

/// The projection restricted to columns with `0 < e < 1`. Columns with
/// `e = 1` are 1 for every user and columns with `e = 0` are empty, so
/// they are filled in afterwards and reduce the row target.
struct Marginals {
    num_users: usize,
    num_items: usize,
    /// Original index of every reduced column.
    active: Vec<usize>,
    full: Vec<usize>,
    /// `C / lambda_ot` on the active columns, shifted so each row's maximum is 0.
    log_kernel: Array2<f64>,
    row_target: f64,
    col_target: Vec<f64>,
    init_n: Vec<f64>,
}

impl Marginals {
    fn new(scores: &ScoreMatrix, e_star: &ExposureVector, config: &RankingConfig) -> Self {
        let (num_users, num_items) = scores.w().dim();
        let e = e_star.values();
        let active: Vec<usize> = (0..num_items)
            .filter(|&i| e[i] > 0.0 && e[i] < 1.0)
            .collect();
        let full: Vec<usize> = (0..num_items).filter(|&i| e[i] >= 1.0).collect();
        let mut log_kernel = Array2::zeros((num_users, active.len()));
        for u in 0..num_users {
            let mut row_max = f64::NEG_INFINITY;
            for (a, &i) in active.iter().enumerate() {
                let c = scores.weighted(u, i) / config.lambda_ot;
                log_kernel[[u, a]] = c;
                row_max = row_max.max(c);
            }
            log_kernel.row_mut(u).mapv_inplace(|c| c - row_max);
        }
        let init_n: Vec<f64> = active.iter().map(|&i| e[i]).collect();
        Self {
            num_users,
            num_items,
            row_target: config.k as f64 - full.len() as f64,
            col_target: init_n.iter().map(|e| e * num_users as f64).collect(),
            init_n,
            active,
            full,
            log_kernel,
        }
    }

    /// Full plan from the reduced one; column scalings of full columns
    /// become infinite and those of empty columns zero.
    fn expand(&self, reduced: &Array2<f64>, state: &mut SinkhornState) -> Array2<f64> {
        let mut x = Array2::zeros((self.num_users, self.num_items));
        for &i in &self.full {
            x.column_mut(i).fill(1.0);
        }
        for (a, &i) in self.active.iter().enumerate() {
            x.column_mut(i).assign(&reduced.column(a));
        }
        let (full_n, empty_n) = if state.log_domain {
            (f64::INFINITY, f64::NEG_INFINITY)
        } else {
            (f64::INFINITY, 0.0)
        };
        let mut n = vec![empty_n; self.num_items];
        for &i in &self.full {
            n[i] = full_n;
        }
        for (a, &i) in self.active.iter().enumerate() {
            n[i] = state.n[a];
        }
        state.n = n;
        x
    }
}

/// Sorting buffers reused across [`capped_scale`] calls.
#[derive(Default)]
struct Scratch {
    sorted: Vec<f64>,
    tail: Vec<f64>,
}

/// Returns `s` with `sum_i min(1, s * b_i) = target`.
///
/// Entries are capped at 1 from the largest down. If fewer than `target`
/// entries are positive the result caps all of them. Returns infinity when
/// `b` has no mass.
fn capped_scale(b: &[f64], target: f64, scratch: &mut Scratch) -> f64 {
    let (sum, max) = b.iter().fold((0.0, 0.0f64), |(s, m), &v| (s + v, m.max(v)));
    if sum <= 0.0 {
        return f64::INFINITY;
    }
    let s = target / sum;
    if s * max <= 1.0 {
        return s;
    }
    let sorted = &mut scratch.sorted;
    sorted.clear();
    sorted.extend(b.iter().copied().filter(|&v| v > 0.0));
    sorted.sort_unstable_by(|x, y| y.total_cmp(x));
    // tail[c] = sum of sorted[c..], accumulated from the small end
    let tail = &mut scratch.tail;
    tail.clear();
    tail.resize(sorted.len() + 1, 0.0);
    for c in (0..sorted.len()).rev() {
        tail[c] = tail[c + 1] + sorted[c];
    }
    for c in 1..=sorted.len() {
        let remaining = target - c as f64;
        if remaining <= 0.0 || c == sorted.len() {
            // the c largest entries alone meet the target
            return 1.0 / sorted[c - 1];
        }
        let s = remaining / tail[c];
        if s * sorted[c] <= 1.0 {
            return s;
        }
    }
    f64::INFINITY
}

/// Fewer than one halving of the error over the last [`STALL_WINDOW`]
/// iterations: linear convergence too slow to finish within the budget.
fn stalled(history: &[f64]) -> bool {
    let n = history.len();
    n > STALL_WINDOW && history[n - 1] > STALL_RATIO * history[n - 1 - STALL_WINDOW]
}

fn in_range(v: &[f64]) -> bool {
    v.iter().all(|&s| (SCALE_MIN..=SCALE_MAX).contains(&s))
}

/// L1 distance of the plan's marginals `sums` from `target`.
fn l1_error(sums: impl Iterator<Item = f64>, target: impl Iterator<Item = f64>) -> f64 {
    sums.zip(target).map(|(s, t)| (s - t).abs()).sum()
}

/// Scaling with capped entries in the linear domain. Returns `None` when a
/// kernel entry underflows or a scaling leaves the representable range.
fn linear_domain(p: &Marginals, stop_on_stall: bool) -> Option<(Array2<f64>, SinkhornState)> {
    let kernel = p.log_kernel.mapv(f64::exp);
    if kernel.iter().any(|&b| b < SCALE_MIN) {
        return None;
    }
    let kernel_t = kernel.t().as_standard_layout().into_owned();
    let (num_users, num_items) = kernel.dim();
    let mut m = vec![p.row_target; num_users];
    let mut n = p.init_n.clone();
    let mut row_buf = vec![0.0; num_items];
    let mut col_buf = vec![0.0; num_users];
    let mut scratch = Scratch::default();
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        // row pass: measure the current row error, then rescale rows
        let mut row_err = 0.0;
        for u in 0..num_users {
            for ((out, b), nj) in row_buf.iter_mut().zip(kernel.row(u)).zip(&n) {
                *out = b * nj;
            }
            if iterations > 0 {
                let sum: f64 = row_buf.iter().map(|v| (m[u] * v).min(1.0)).sum();
                row_err += (sum - p.row_target).abs();
            }
            m[u] = capped_scale(&row_buf, p.row_target, &mut scratch);
        }
        if iterations > 0 {
            history.push(row_err);
            if row_err < TOLERANCE
                || iterations >= MAX_ITERATIONS
                || (stop_on_stall && stalled(&history))
            {
                break;
            }
        }
        for j in 0..num_items {
            for ((out, b), mu) in col_buf.iter_mut().zip(kernel_t.row(j)).zip(&m) {
                *out = b * mu;
            }
            n[j] = capped_scale(&col_buf, p.col_target[j], &mut scratch);
        }
        iterations += 1;
        if !in_range(&m) || !in_range(&n) {
            return None;
        }
    }

    // the last row pass rescaled m; rebuild the plan from the scalings that
    // were measured, i.e. redo the column pass for consistency
    for j in 0..num_items {
        for ((out, b), mu) in col_buf.iter_mut().zip(kernel_t.row(j)).zip(&m) {
            *out = b * mu;
        }
        n[j] = capped_scale(&col_buf, p.col_target[j], &mut scratch);
    }
    if !in_range(&m) || !in_range(&n) {
        return None;
    }
    let mut x = kernel;
    for (u, mut row) in x.rows_mut().into_iter().enumerate() {
        for (v, nj) in row.iter_mut().zip(&n) {
            *v = (*v * m[u] * nj).min(1.0);
        }
    }
    let state = finish(p, &x, m, n, false, iterations, history);
    Some((x, state))
}

/// `exp(v - max v)` into `out`; returns `max v`.
fn shifted_exp(values: impl Iterator<Item = f64> + Clone, out: &mut [f64]) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    for (o, v) in out.iter_mut().zip(values) {
        *o = (v - max).exp();
    }
    max
}

/// The same updates on log scalings `f = ln m`, `g = ln n`, with every
/// exponential taken relative to the running maximum.
fn log_domain(p: &Marginals, stop_on_stall: bool) -> (Array2<f64>, SinkhornState) {
    let (num_users, num_items) = p.log_kernel.dim();
    let kernel_t = p.log_kernel.t().as_standard_layout().into_owned();
    let mut f = vec![p.row_target.ln(); num_users];
    let mut g: Vec<f64> = p.init_n.iter().map(|e| e.ln()).collect();
    let mut row_buf = vec![0.0; num_items];
    let mut col_buf = vec![0.0; num_users];
    let mut scratch = Scratch::default();
    let mut history = Vec::new();
    let mut iterations = 0;

    let col_pass = |f: &[f64], g: &mut [f64], col_buf: &mut [f64], scratch: &mut Scratch| {
        for j in 0..num_items {
            let shift = shifted_exp(kernel_t.row(j).iter().zip(f).map(|(k, fu)| k + fu), col_buf);
            g[j] = capped_scale(col_buf, p.col_target[j], scratch).ln() - shift;
        }
    };

    loop {
        let mut row_err = 0.0;
        for u in 0..num_users {
            let shift = shifted_exp(
                p.log_kernel.row(u).iter().zip(&g).map(|(k, gj)| k + gj),
                &mut row_buf,
            );
            if iterations > 0 {
                let scale = (f[u] + shift).exp();
                let sum: f64 = row_buf.iter().map(|v| (scale * v).min(1.0)).sum();
                row_err += (sum - p.row_target).abs();
            }
            f[u] = capped_scale(&row_buf, p.row_target, &mut scratch).ln() - shift;
        }
        if iterations > 0 {
            history.push(row_err);
            if row_err < TOLERANCE
                || iterations >= MAX_ITERATIONS
                || (stop_on_stall && stalled(&history))
            {
                break;
            }
        }
        col_pass(&f, &mut g, &mut col_buf, &mut scratch);
        iterations += 1;
    }
    col_pass(&f, &mut g, &mut col_buf, &mut scratch);

    let mut x = Array2::zeros((num_users, num_items));
    for ((u, j), v) in x.indexed_iter_mut() {
        *v = (f[u] + p.log_kernel[[u, j]] + g[j]).exp().min(1.0);
    }
    let state = finish(p, &x, f, g, true, iterations, history);
    (x, state)
}

/// Dual variables, plan, marginal gradients and their L1 error at `(f, g)`.
struct DualPoint {
    f: Vec<f64>,
    g: Vec<f64>,
    x: Array2<f64>,
    row_grad: Vec<f64>,
    col_grad: Vec<f64>,
    error: f64,
    dual: f64,
}

impl DualPoint {
    fn new(p: &Marginals, f: Vec<f64>, g: Vec<f64>) -> Self {
        let mut x = p.log_kernel.clone();
        for (u, mut row) in x.rows_mut().into_iter().enumerate() {
            for (v, gj) in row.iter_mut().zip(&g) {
                *v = (*v + f[u] + gj).min(0.0).exp();
            }
        }
        let row_grad: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| p.row_target - r.sum())
            .collect();
        let col_grad: Vec<f64> = x
            .columns()
            .into_iter()
            .zip(&p.col_target)
            .map(|(c, t)| t - c.sum())
            .collect();
        let l1 = |v: &[f64]| v.iter().map(|d| d.abs()).sum::<f64>();
        let error = l1(&row_grad).max(l1(&col_grad));
        let mut dual: f64 = p.row_target * f.iter().sum::<f64>()
            + p.col_target
                .iter()
                .zip(&g)
                .map(|(c, gj)| c * gj)
                .sum::<f64>();
        for (u, row) in p.log_kernel.rows().into_iter().enumerate() {
            for (l, gj) in row.iter().zip(&g) {
                let z = l + f[u] + gj;
                dual -= if z <= 0.0 { z.exp() } else { 1.0 + z };
            }
        }
        Self {
            dual,
            f,
            g,
            x,
            row_grad,
            col_grad,
            error,
        }
    }
}

/// Newton's method on the concave dual of the capped problem, started from
/// the scalings the iteration stopped at. The Hessian has weight `x[u, i]`
/// on every uncapped entry and is inverted by preconditioned conjugate
/// gradients. Steps are halved until the dual objective makes sufficient
/// progress.
fn newton(p: &Marginals, state: &SinkhornState) -> (Array2<f64>, SinkhornState) {
    let to_log = |v: &[f64]| -> Vec<f64> {
        if state.log_domain {
            v.to_vec()
        } else {
            v.iter().map(|s| s.ln()).collect()
        }
    };
    let mut point = DualPoint::new(p, to_log(&state.m), to_log(&state.n));
    let mut steps = 0;
    while steps < MAX_NEWTON_STEPS && point.error >= TOLERANCE {
        let weights = point.x.mapv(|v| if v < 1.0 { v } else { 0.0 });
        let Some((df, dg)) = newton_direction(&weights, &point.row_grad, &point.col_grad) else {
            break;
        };
        let slope: f64 = point
            .row_grad
            .iter()
            .zip(&df)
            .chain(point.col_grad.iter().zip(&dg))
            .map(|(a, b)| a * b)
            .sum();
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let f = point
                .f
                .iter()
                .zip(&df)
                .map(|(a, d)| a + alpha * d)
                .collect();
            let g = point
                .g
                .iter()
                .zip(&dg)
                .map(|(a, d)| a + alpha * d)
                .collect();
            let trial = DualPoint::new(p, f, g);
            if trial.dual >= point.dual + 1e-4 * alpha * slope {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(trial) => point = trial,
            None => break,
        }
        steps += 1;
    }
    debug!(
        "newton finished after {steps} steps at error {:e}",
        point.error
    );
    let mut next = finish(
        p,
        &point.x,
        point.f,
        point.g,
        true,
        state.iterations_run,
        state.error_history.clone(),
    );
    next.newton_steps = steps;
    (point.x, next)
}

/// Solves `H d = grad` for the dual Newton direction by preconditioned
/// conjugate gradients, with `H` the weighted incidence Laplacian
/// `sum_{u,i} w[u, i] (e_u + e_i)(e_u + e_i)^T`.
fn newton_direction(
    w: &Array2<f64>,
    row_grad: &[f64],
    col_grad: &[f64],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let (num_users, num_items) = w.dim();
    let dim = num_users + num_items;
    let ridge = 1e-12;
    let mut diag = vec![ridge; dim];
    for ((u, i), &v) in w.indexed_iter() {
        diag[u] += v;
        diag[num_users + i] += v;
    }
    let apply = |d: &[f64], out: &mut [f64]| {
        for (o, (dd, dv)) in out.iter_mut().zip(d.iter().zip(&diag)) {
            *o = dv * dd;
        }
        for ((u, i), &v) in w.indexed_iter() {
            let a = d[u];
            let b = d[num_users + i];
            out[u] += v * b;
            out[num_users + i] += v * a;
        }
    };
    let rhs: Vec<f64> = row_grad.iter().chain(col_grad).copied().collect();
    let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut sol = vec![0.0; dim];
    let mut r = rhs;
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(a, d)| a / d).collect();
    let mut dir = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut hd = vec![0.0; dim];
    for _ in 0..dim.max(50) * 2 {
        if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-12 * rhs_norm {
            break;
        }
        apply(&dir, &mut hd);
        let curvature: f64 = dir.iter().zip(&hd).map(|(a, b)| a * b).sum();
        if !(curvature > 0.0) {
            break;
        }
        let step = rz / curvature;
        for k in 0..dim {
            sol[k] += step * dir[k];
            r[k] -= step * hd[k];
        }
        for k in 0..dim {
            z[k] = r[k] / diag[k];
        }
        let rz_next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..dim {
            dir[k] = z[k] + beta * dir[k];
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let dg = sol.split_off(num_users);
    Some((sol, dg))
}

fn finish(
    p: &Marginals,
    x: &Array2<f64>,
    m: Vec<f64>,
    n: Vec<f64>,
    log_domain: bool,
    iterations_run: usize,
    error_history: Vec<f64>,
) -> SinkhornState {
    let row_err = l1_error(
        x.rows().into_iter().map(|r| r.sum()),
        std::iter::repeat(p.row_target),
    );
    let col_err = l1_error(
        x.columns().into_iter().map(|c| c.sum()),
        p.col_target.iter().copied(),
    );
    SinkhornState {
        m,
        n,
        log_domain,
        iterations_run,
        marginal_error: row_err.max(col_err),
        error_history,
        newton_steps: 0,
        clamped_mass: 0.0,
    }
}
