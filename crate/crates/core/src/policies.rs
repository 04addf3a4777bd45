//! Baseline ranking policies: accuracy-first top-k and item-level additive taxes.
//!
//! An item-level tax policy ranks every user's items by
//! `s[u, i] = gamma_i * w[u, i] + mu_i` and keeps the best `k`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{Mode, RankingLists, ScoreMatrix};

/// Per-item additive tax (negative) or subsidy (positive).
#[derive(Debug, Clone, PartialEq)]
pub struct ItemTaxPolicy {
    pub mu: Vec<f64>,
    pub lambda: f64,
}

impl ItemTaxPolicy {
    pub fn new(mu: Vec<f64>, lambda: f64) -> Result<Self> {
        if let Some((i, &m)) = mu.iter().enumerate().find(|(_, m)| !m.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "tax mu[{i}] = {m} is not finite"
            )));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidInput(format!(
                "tax rate lambda must be nonnegative, got {lambda}"
            )));
        }
        Ok(Self { mu, lambda })
    }

    pub fn zero(num_items: usize) -> Self {
        Self {
            mu: vec![0.0; num_items],
            lambda: 0.0,
        }
    }
}

/// Indices of the `k` largest values, descending, ties to the lowest index.
pub(crate) fn best_k(values: &[f64], k: usize) -> Vec<usize> {
    let by_rank = |i: &usize, j: &usize| values[*j].total_cmp(&values[*i]).then(i.cmp(j));
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, by_rank);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_rank);
    idx
}

fn check_k(scores: &ScoreMatrix, k: usize) -> Result<()> {
    if k == 0 || k > scores.num_items() {
        return Err(Error::InvalidInput(format!(
            "list size k = {k} must lie in 1..={}",
            scores.num_items()
        )));
    }
    Ok(())
}

fn taxed_row(scores: &ScoreMatrix, user: usize, mu: &[f64]) -> Vec<f64> {
    (0..scores.num_items())
        .map(|i| scores.weighted(user, i) + mu[i])
        .collect()
}

/// Accuracy-first lists: the `k` highest `gamma_i * w[u, i]` per user.
pub fn top_k(scores: &ScoreMatrix, k: usize) -> Result<RankingLists> {
    taxed_top_k(scores, &ItemTaxPolicy::zero(scores.num_items()), k)
}

/// Lists ranked by the taxed score `gamma_i * w[u, i] + mu_i`.
pub fn taxed_top_k(scores: &ScoreMatrix, policy: &ItemTaxPolicy, k: usize) -> Result<RankingLists> {
    check_k(scores, k)?;
    if policy.mu.len() != scores.num_items() {
        return Err(Error::DimensionMismatch {
            axis: "mu",
            expected: scores.num_items(),
            found: policy.mu.len(),
        });
    }
    let lists = (0..scores.num_users())
        .into_par_iter()
        .map(|u| best_k(&taxed_row(scores, u, &policy.mu), k))
        .collect();
    RankingLists::new(lists, k, scores.num_items())
}

/// Sequential popularity tax: users are served in index order and item `i`
/// is taxed `lambda` times the utility it has accumulated so far.
pub fn greedy_popularity_tax(
    scores: &ScoreMatrix,
    lambda: f64,
    k: usize,
    mode: Mode,
) -> Result<RankingLists> {
    check_k(scores, k)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!(
            "tax rate lambda must be nonnegative, got {lambda}"
        )));
    }
    let mut running = vec![0.0; scores.num_items()];
    let mut mu = vec![0.0; scores.num_items()];
    let mut lists = Vec::with_capacity(scores.num_users());
    for u in 0..scores.num_users() {
        for (m, v) in mu.iter_mut().zip(&running) {
            *m = -lambda * v;
        }
        let list = best_k(&taxed_row(scores, u, &mu), k);
        for &i in &list {
            running[i] += match mode {
                Mode::Exposure => 1.0,
                Mode::Ctr => scores.w()[[u, i]],
            };
        }
        lists.push(list);
    }
    RankingLists::new(lists, k, scores.num_items())
}
