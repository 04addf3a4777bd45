//! End-to-end pipeline runs, tax-rate sweeps, continuity probes, and
//! synthetic instances.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics;
use crate::policies;
use crate::sampling;
use crate::transport::{self, SinkhornState};
use crate::types::{
    compute_utilities, expected_utilities, ExposureVector, Mode, RankingConfig, RankingLists,
    RankingProbabilities, ScoreMatrix, TradeoffPoint, UtilityVector,
};
use crate::waterfill;

/// Tax rates swept when none are given.
pub const DEFAULT_T_GRID: [f64; 7] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub solve: Duration,
    pub project: Duration,
    pub sample: Duration,
}

/// Exposure solution and its projection for one tax rate.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub exposure: ExposureVector,
    pub probs: RankingProbabilities,
    pub state: SinkhornState,
    pub timings: StageTimings,
}

/// Solves the exposure program and projects it onto ranking probabilities.
pub fn run_pipeline(scores: &ScoreMatrix, config: &RankingConfig) -> Result<PipelineRun> {
    config.validate(scores.num_items())?;
    let start = Instant::now();
    let problem = waterfill::build_problem(scores, config)?;
    let exposure = waterfill::solve(&problem)?;
    let solved = Instant::now();
    let (probs, state) = transport::project_with_state(scores, &exposure, config)?;
    let projected = Instant::now();
    Ok(PipelineRun {
        exposure,
        probs,
        state,
        timings: StageTimings {
            solve: solved - start,
            project: projected - solved,
            sample: Duration::ZERO,
        },
    })
}

/// Full pipeline including list sampling.
pub fn rank(scores: &ScoreMatrix, config: &RankingConfig) -> Result<(PipelineRun, RankingLists)> {
    let mut run = run_pipeline(scores, config)?;
    let start = Instant::now();
    let lists = sampling::sample_lists(&run.probs, scores, config.seed)?;
    run.timings.sample = start.elapsed();
    Ok((run, lists))
}

/// Accuracy and fairness of one utility vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub ecn: f64,
    pub ecpm: Option<f64>,
    pub gini: f64,
    /// `sum_i gamma_i * v_i`, the accuracy compared by the price of taxation.
    pub accuracy: f64,
}

pub fn evaluate(scores: &ScoreMatrix, v: &UtilityVector) -> Result<Evaluation> {
    let ecn = metrics::ecn(v, scores.num_users())?;
    let ecpm = match scores.bids() {
        Some(b) => Some(metrics::ecpm(v, Some(b), scores.num_users())?),
        None => None,
    };
    let gini = metrics::gini(v, scores.gamma())?;
    let accuracy = v
        .values()
        .iter()
        .zip(scores.gamma())
        .map(|(x, g)| g * x)
        .sum();
    Ok(Evaluation {
        ecn,
        ecpm,
        gini,
        accuracy,
    })
}

/// Which utilities a sweep measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UtilitySource {
    /// Expectation under the ranking probabilities (no sampling noise).
    #[default]
    Expected,
    /// One sampled list set per tax rate.
    Realized,
}

fn evaluate_at(
    scores: &ScoreMatrix,
    config: &RankingConfig,
    source: UtilitySource,
) -> Result<Evaluation> {
    let run = run_pipeline(scores, config)?;
    let v = match source {
        UtilitySource::Expected => expected_utilities(scores, &run.probs, config.mode)?,
        UtilitySource::Realized => {
            let lists = sampling::sample_lists(&run.probs, scores, config.seed)?;
            compute_utilities(scores, &lists, config.mode)?
        }
    };
    evaluate(scores, &v)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Internal(e.to_string()))
}

/// One trade-off point per tax rate, with the price of taxation measured
/// against the `t = 0` run. `jobs = 0` uses the available parallelism.
pub fn sweep(
    scores: &ScoreMatrix,
    config: &RankingConfig,
    t_grid: &[f64],
    jobs: usize,
    source: UtilitySource,
) -> Result<Vec<TradeoffPoint>> {
    if t_grid.is_empty() {
        return Err(Error::InvalidInput("tax-rate grid is empty".into()));
    }
    if t_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput(
            "tax-rate grid must be ascending".into(),
        ));
    }
    if let Some(&t) = t_grid.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
        return Err(Error::InvalidInput(format!("invalid tax rate {t} in grid")));
    }
    let mut rates = t_grid.to_vec();
    let has_zero = rates[0] == 0.0;
    if !has_zero {
        rates.insert(0, 0.0);
    }
    let evals: Vec<Evaluation> = pool(jobs)?.install(|| {
        rates
            .par_iter()
            .map(|&t| evaluate_at(scores, &config.with_tax_rate(t), source))
            .collect::<Result<Vec<_>>>()
    })?;
    let baseline = evals[0].accuracy;
    let skip = usize::from(!has_zero);
    rates
        .iter()
        .zip(&evals)
        .skip(skip)
        .map(|(&t, e)| {
            Ok(TradeoffPoint {
                tax_rate: t,
                ecn: e.ecn,
                ecpm: e.ecpm,
                gini: e.gini,
                pot: metrics::pot(baseline, e.accuracy)?,
            })
        })
        .collect()
}

/// Tax rate `lambda` of the greedy popularity-tax baseline matched to a
/// Tax-rank tax rate `t`.
pub fn baseline_lambda(t: f64, num_users: usize) -> f64 {
    t / num_users as f64
}

/// Metric changes between `t` and `t + delta` for both policies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuityRow {
    pub t: f64,
    pub taxrank_ecn_jump: f64,
    pub taxrank_gini_jump: f64,
    pub lambda: f64,
    pub baseline_ecn_jump: f64,
    pub baseline_gini_jump: f64,
}

fn baseline_eval(scores: &ScoreMatrix, config: &RankingConfig, t: f64) -> Result<Evaluation> {
    let lambda = baseline_lambda(t, scores.num_users());
    let lists = policies::greedy_popularity_tax(scores, lambda, config.k, config.mode)?;
    evaluate(scores, &compute_utilities(scores, &lists, config.mode)?)
}

/// Probes metric continuity of Tax-rank (expected utilities) and of the
/// greedy popularity-tax baseline around every grid point.
pub fn continuity(
    scores: &ScoreMatrix,
    config: &RankingConfig,
    centers: &[f64],
    delta: f64,
    jobs: usize,
) -> Result<Vec<ContinuityRow>> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidInput(format!(
            "delta must be nonnegative, got {delta}"
        )));
    }
    if centers.is_empty() {
        return Err(Error::InvalidInput("tax-rate grid is empty".into()));
    }
    pool(jobs)?.install(|| {
        centers
            .par_iter()
            .map(|&t| {
                let at = |t: f64| -> Result<(Evaluation, Evaluation)> {
                    let tax =
                        evaluate_at(scores, &config.with_tax_rate(t), UtilitySource::Expected)?;
                    Ok((tax, baseline_eval(scores, config, t)?))
                };
                let (tax0, base0) = at(t)?;
                let (tax1, base1) = at(t + delta)?;
                Ok(ContinuityRow {
                    t,
                    taxrank_ecn_jump: (tax1.ecn - tax0.ecn).abs(),
                    taxrank_gini_jump: (tax1.gini - tax0.gini).abs(),
                    lambda: baseline_lambda(t, scores.num_users()),
                    baseline_ecn_jump: (base1.ecn - base0.ecn).abs(),
                    baseline_gini_jump: (base1.gini - base0.gini).abs(),
                })
            })
            .collect()
    })
}

/// Largest and median value of a series of jumps.
pub fn jump_stats(jumps: &[f64]) -> (f64, f64) {
    if jumps.is_empty() {
        return (0.0, 0.0);
    }
    let mut sorted = jumps.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    (sorted[n - 1], median)
}

/// Evenly spaced grid `start, start + step, ...` with `count` points.
pub fn linear_grid(start: f64, step: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| start + step * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    /// Independent `U[0, 1)` scores.
    Uniform,
    /// Item popularity `1 / rank` times per-pair noise `U[0.5, 1.5)`, clamped to `[0, 1]`.
    PowerLaw,
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Distribution::Uniform),
            "powerlaw" => Ok(Distribution::PowerLaw),
            other => Err(Error::InvalidInput(format!(
                "unknown distribution {other:?} (expected uniform or powerlaw)"
            ))),
        }
    }
}

/// Synthetic click-through-rate matrix with unit item weights.
pub fn synth(
    num_users: usize,
    num_items: usize,
    distribution: Distribution,
    seed: u64,
) -> Result<ScoreMatrix> {
    if num_users == 0 || num_items == 0 {
        return Err(Error::InvalidInput("sizes must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::zeros((num_users, num_items));
    for ((_, i), v) in w.indexed_iter_mut() {
        *v = match distribution {
            Distribution::Uniform => rng.random::<f64>(),
            Distribution::PowerLaw => {
                let popularity = 1.0 / (i + 1) as f64;
                let noise = 0.5 + rng.random::<f64>();
                (popularity * noise).clamp(0.0, 1.0)
            }
        };
    }
    ScoreMatrix::with_unit_gamma(w)
}

/// Convenience: the default configuration used by the CLI.
pub fn default_config(k: usize, mode: Mode) -> RankingConfig {
    RankingConfig {
        k,
        tax_rate: 1.0,
        lambda_ot: 0.5,
        seed: 0,
        mode,
    }
}
