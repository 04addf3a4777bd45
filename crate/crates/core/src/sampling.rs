//! Fixed-size list sampling with prescribed inclusion probabilities.
//!
//! Each user's list is drawn by systematic (Madow) sampling: items are laid
//! out in a random order as consecutive intervals of length `x[u, i]` on
//! `[0, k)`, one uniform `U` is drawn, and the items whose intervals contain
//! `U, U + 1, ..., U + k - 1` are selected. An interval of length at most 1
//! holds at most one of those points, so the `k` items are distinct and item
//! `i` is included with probability exactly `x[u, i]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{
    compute_utilities, expected_utilities, Mode, RankingLists, RankingProbabilities, ScoreMatrix,
};

/// Largest tolerated deviation of a row sum from `k`.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;

/// Samples one list per user; the same seed always yields the same lists.
pub fn sample_lists(
    probs: &RankingProbabilities,
    scores: &ScoreMatrix,
    seed: u64,
) -> Result<RankingLists> {
    if probs.num_users() != scores.num_users() {
        return Err(Error::DimensionMismatch {
            axis: "users",
            expected: scores.num_users(),
            found: probs.num_users(),
        });
    }
    if probs.num_items() != scores.num_items() {
        return Err(Error::DimensionMismatch {
            axis: "items",
            expected: scores.num_items(),
            found: probs.num_items(),
        });
    }
    let k = probs.k();
    let x = probs.matrix();
    let lists = (0..probs.num_users())
        .into_par_iter()
        .map(|u| {
            let row = x.row(u);
            let row = row
                .as_slice()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| row.to_vec());
            let mut rng = user_rng(seed, u);
            let mut list = sample_row(&row, k, &mut rng).map_err(|e| match e {
                Error::InfeasibleMarginals { row_sum, k, .. } => Error::InfeasibleMarginals {
                    user: u,
                    row_sum,
                    k,
                },
                other => other,
            })?;
            order_by_score(&mut list, scores, u);
            Ok(list)
        })
        .collect::<Result<Vec<_>>>()?;
    RankingLists::new(lists, k, probs.num_items())
}

/// Independent stream per `(seed, user)` so results do not depend on scheduling.
fn user_rng(seed: u64, user: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user as u64);
    rng
}

fn order_by_score(list: &mut [usize], scores: &ScoreMatrix, user: usize) {
    list.sort_by(|&i, &j| {
        scores
            .weighted(user, j)
            .total_cmp(&scores.weighted(user, i))
            .then(i.cmp(&j))
    });
}

/// Renormalizes a row to sum to exactly `k` with every entry at most 1.
fn normalize_row(row: &[f64], k: usize) -> Result<Vec<f64>> {
    let sum: f64 = row.iter().sum();
    if !sum.is_finite() || (sum - k as f64).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::InfeasibleMarginals {
            user: 0,
            row_sum: sum,
            k,
        });
    }
    let mut p: Vec<f64> = row.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    // rescale the uncapped entries until none overshoot 1
    let mut capped = vec![false; p.len()];
    loop {
        let fixed = capped.iter().filter(|&&c| c).count() as f64;
        let free_sum: f64 = p
            .iter()
            .zip(&capped)
            .filter(|(_, c)| !**c)
            .map(|(v, _)| v)
            .sum();
        if free_sum <= 0.0 {
            break;
        }
        let scale = (k as f64 - fixed) / free_sum;
        let mut changed = false;
        for (v, c) in p.iter_mut().zip(capped.iter_mut()) {
            if !*c {
                *v *= scale;
                if *v >= 1.0 {
                    *v = 1.0;
                    *c = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(p)
}

/// Draws `k` distinct indices with inclusion probabilities `row`.
pub fn sample_row<R: Rng + ?Sized>(row: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let p = normalize_row(row, k)?;
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.shuffle(rng);
    let start: f64 = rng.random::<f64>();

    let mut picked = Vec::with_capacity(k);
    let mut taken = vec![false; p.len()];
    let mut next = start;
    let mut cumulative = 0.0;
    for &i in &order {
        if picked.len() == k {
            break;
        }
        cumulative += p[i];
        if next < cumulative {
            picked.push(i);
            taken[i] = true;
            next += 1.0;
        }
    }
    if picked.len() < k {
        // rounding left the last point just past the final interval; the
        // missing pick belongs to the largest remaining probability
        let mut rest: Vec<usize> = (0..p.len()).filter(|&i| !taken[i]).collect();
        rest.sort_by(|&i, &j| p[j].total_cmp(&p[i]).then(i.cmp(&j)));
        picked.extend(rest.into_iter().take(k - picked.len()));
    }
    Ok(picked)
}

/// Per-item comparison of sampled utilities against their expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingReport {
    pub draws: usize,
    pub expected: Vec<f64>,
    pub mean_realized: Vec<f64>,
    /// Standard error of each mean over the draws.
    pub std_error: Vec<f64>,
    /// `(mean - expected) / std_error`; 0 when both the variance and the gap vanish.
    pub z: Vec<f64>,
    pub max_abs_z: f64,
}

/// Samples `draws` independent list sets and compares the mean realized
/// utility per item with the expected utility.
pub fn expected_vs_realized(
    probs: &RankingProbabilities,
    scores: &ScoreMatrix,
    mode: Mode,
    draws: usize,
    seed: u64,
) -> Result<SamplingReport> {
    if draws == 0 {
        return Err(Error::InvalidInput("draws must be at least 1".into()));
    }
    let expected = expected_utilities(scores, probs, mode)?.0;
    let n = scores.num_items();
    // Welford running mean and sum of squared deviations
    let mut mean_realized = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for d in 0..draws {
        let lists = sample_lists(probs, scores, seed.wrapping_add(d as u64))?;
        let v = compute_utilities(scores, &lists, mode)?;
        let count = (d + 1) as f64;
        for ((mean, acc), x) in mean_realized.iter_mut().zip(m2.iter_mut()).zip(v.values()) {
            let delta = x - *mean;
            *mean += delta / count;
            *acc += delta * (x - *mean);
        }
    }
    let dn = draws as f64;
    let std_error: Vec<f64> = m2
        .iter()
        .map(|acc| {
            if draws < 2 {
                0.0
            } else {
                (acc.max(0.0) / (dn - 1.0) / dn).sqrt()
            }
        })
        .collect();
    let z: Vec<f64> = mean_realized
        .iter()
        .zip(&expected)
        .zip(&std_error)
        .map(|((m, e), se)| {
            let gap = m - e;
            if *se > 0.0 {
                gap / se
            } else if gap.abs() <= 1e-9 * e.abs().max(1.0) {
                0.0
            } else {
                gap.signum() * f64::INFINITY
            }
        })
        .collect();
    let max_abs_z = z.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    Ok(SamplingReport {
        draws,
        expected,
        mean_realized,
        std_error,
        z,
        max_abs_z,
    })
}
