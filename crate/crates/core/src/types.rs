//! Domain types shared by the solver, projection, sampler, and metrics.
//!
//! Every type validates its invariants on construction and is immutable
//! afterwards, so values can be shared freely across threads.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};

/// How item utility is accumulated from a ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Every inclusion in a list counts as one exposure.
    Exposure,
    /// Every inclusion counts its click-through rate `w[u, i]`.
    Ctr,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Exposure => write!(f, "exposure"),
            Mode::Ctr => write!(f, "ctr"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exposure" => Ok(Mode::Exposure),
            "ctr" => Ok(Mode::Ctr),
            other => Err(Error::InvalidInput(format!(
                "unknown mode {other:?} (expected exposure or ctr)"
            ))),
        }
    }
}

/// Dense user-by-item relevance matrix with per-item weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    w: Array2<f64>,
    gamma: Vec<f64>,
    bids: Option<Vec<f64>>,
}

impl ScoreMatrix {
    /// Builds a score matrix from relevance weights and item weights.
    pub fn new(w: Array2<f64>, gamma: Vec<f64>) -> Result<Self> {
        let (_, num_items) = w.dim();
        if w.nrows() == 0 || num_items == 0 {
            return Err(Error::InvalidInput(
                "score matrix needs at least one user and one item".into(),
            ));
        }
        if gamma.len() != num_items {
            return Err(Error::DimensionMismatch {
                axis: "gamma",
                expected: num_items,
                found: gamma.len(),
            });
        }
        if let Some(((u, i), &x)) = w.indexed_iter().find(|(_, x)| !x.is_finite() || **x < 0.0) {
            return Err(Error::InvalidInput(format!(
                "score w[{u}, {i}] = {x} must be finite and nonnegative"
            )));
        }
        if let Some((i, &g)) = gamma
            .iter()
            .enumerate()
            .find(|(_, g)| !g.is_finite() || **g <= 0.0)
        {
            return Err(Error::InvalidInput(format!(
                "item weight gamma[{i}] = {g} must be positive"
            )));
        }
        Ok(Self {
            w,
            gamma,
            bids: None,
        })
    }

    /// Unit item weights, the recommendation default.
    pub fn with_unit_gamma(w: Array2<f64>) -> Result<Self> {
        let n = w.ncols();
        Self::new(w, vec![1.0; n])
    }

    /// Convenience constructor from nested rows with unit item weights.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_users = rows.len();
        let num_items = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != num_items) {
            return Err(Error::DimensionMismatch {
                axis: "row length",
                expected: num_items,
                found: bad.len(),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let w = Array2::from_shape_vec((num_users, num_items), flat)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::with_unit_gamma(w)
    }

    /// Attaches advertiser bids. When `log_gamma` is set the item weights
    /// become `ln(bid)`, which must then be positive for every item.
    pub fn with_bids(mut self, bids: Vec<f64>, log_gamma: bool) -> Result<Self> {
        if bids.len() != self.num_items() {
            return Err(Error::DimensionMismatch {
                axis: "bids",
                expected: self.num_items(),
                found: bids.len(),
            });
        }
        if let Some((i, &b)) = bids
            .iter()
            .enumerate()
            .find(|(_, b)| !b.is_finite() || **b <= 0.0)
        {
            return Err(Error::InvalidInput(format!(
                "bid for item {i} is {b}; bids must be positive"
            )));
        }
        if log_gamma {
            self.gamma = gamma_from_bids(&bids)?;
        }
        self.bids = Some(bids);
        Ok(self)
    }

    /// Checks the click-through-rate range `w <= 1`.
    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        if mode == Mode::Ctr {
            if let Some(((u, i), &x)) = self.w.indexed_iter().find(|(_, x)| **x > 1.0) {
                return Err(Error::InvalidInput(format!(
                    "score w[{u}, {i}] = {x} exceeds 1 in ctr mode"
                )));
            }
        }
        Ok(())
    }

    pub fn num_users(&self) -> usize {
        self.w.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn bids(&self) -> Option<&[f64]> {
        self.bids.as_deref()
    }

    /// Weighted score `gamma[i] * w[u, i]`.
    #[inline]
    pub fn weighted(&self, user: usize, item: usize) -> f64 {
        self.gamma[item] * self.w[[user, item]]
    }
}

/// Item weights `ln(bid)` used for advertising.
pub fn gamma_from_bids(bids: &[f64]) -> Result<Vec<f64>> {
    let gamma: Vec<f64> = bids.iter().map(|b| b.ln()).collect();
    if gamma.iter().all(|&g| g == 0.0) {
        return Err(Error::InvalidInput(
            "log-bid weights are zero; supply gamma override".into(),
        ));
    }
    if let Some((i, &g)) = gamma.iter().enumerate().find(|(_, g)| **g <= 0.0) {
        return Err(Error::InvalidInput(format!(
            "log-bid weight for item {i} is {g}; bids must exceed 1 or supply gamma override"
        )));
    }
    Ok(gamma)
}

/// Parameters of one ranking run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingConfig {
    pub k: usize,
    pub tax_rate: f64,
    pub lambda_ot: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl RankingConfig {
    pub fn validate(&self, num_items: usize) -> Result<()> {
        if self.k == 0 || self.k > num_items {
            return Err(Error::InvalidInput(format!(
                "list size k = {} must lie in 1..={num_items}",
                self.k
            )));
        }
        if !(self.tax_rate >= 0.0) || self.tax_rate.is_nan() {
            return Err(Error::InvalidInput(format!(
                "tax rate must be nonnegative, got {}",
                self.tax_rate
            )));
        }
        if !(self.lambda_ot > 0.0) || !self.lambda_ot.is_finite() {
            return Err(Error::InvalidInput(format!(
                "lambda_ot must be positive, got {}",
                self.lambda_ot
            )));
        }
        Ok(())
    }

    pub fn with_tax_rate(self, tax_rate: f64) -> Self {
        Self { tax_rate, ..self }
    }
}

/// Relaxed per-user exposure share of every item; sums to `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureVector {
    e: Vec<f64>,
    k: usize,
}

impl ExposureVector {
    pub const SUM_TOLERANCE: f64 = 1e-8;

    pub fn new(e: Vec<f64>, k: usize) -> Result<Self> {
        if let Some((i, &x)) = e
            .iter()
            .enumerate()
            .find(|(_, x)| !(0.0..=1.0).contains(*x))
        {
            return Err(Error::InvalidInput(format!(
                "exposure e[{i}] = {x} outside [0, 1]"
            )));
        }
        let total: f64 = e.iter().sum();
        if (total - k as f64).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "exposure sums to {total}, expected {k}"
            )));
        }
        Ok(Self { e, k })
    }

    pub fn values(&self) -> &[f64] {
        &self.e
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }
}

/// Marginal inclusion probabilities `x[u, i]` of item `i` in user `u`'s list.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingProbabilities {
    x: Array2<f64>,
    k: usize,
}

impl RankingProbabilities {
    pub const ENTRY_SLACK: f64 = 1e-9;

    /// Wraps a probability matrix, clamping entries that overshoot `[0, 1]`
    /// by at most [`Self::ENTRY_SLACK`].
    pub fn new(mut x: Array2<f64>, k: usize) -> Result<Self> {
        for ((u, i), v) in x.indexed_iter_mut() {
            if !v.is_finite() || *v < -Self::ENTRY_SLACK || *v > 1.0 + Self::ENTRY_SLACK {
                return Err(Error::InvalidInput(format!(
                    "probability x[{u}, {i}] = {v} outside [0, 1]"
                )));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { x, k })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_users(&self) -> usize {
        self.x.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.x.ncols()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.x.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.x.columns().into_iter().map(|c| c.sum()).collect()
    }
}

/// Ordered top-`k` lists, one per user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingLists {
    lists: Vec<Vec<usize>>,
    k: usize,
    num_items: usize,
}

impl RankingLists {
    pub fn new(lists: Vec<Vec<usize>>, k: usize, num_items: usize) -> Result<Self> {
        for (u, list) in lists.iter().enumerate() {
            if list.len() != k {
                return Err(Error::InvalidInput(format!(
                    "list for user {u} has {} entries, expected {k}",
                    list.len()
                )));
            }
            if let Some(&bad) = list.iter().find(|&&i| i >= num_items) {
                return Err(Error::InvalidInput(format!(
                    "list for user {u} names item {bad}, but there are {num_items} items"
                )));
            }
            let mut seen = HashSet::with_capacity(k);
            if let Some(&dup) = list.iter().find(|&&i| !seen.insert(i)) {
                return Err(Error::InvalidInput(format!(
                    "list for user {u} repeats item {dup}"
                )));
            }
        }
        Ok(Self {
            lists,
            k,
            num_items,
        })
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_users(&self) -> usize {
        self.lists.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }
}

/// Accumulated per-item utility.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityVector(pub Vec<f64>);

impl UtilityVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// One row of a trade-off table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffPoint {
    pub tax_rate: f64,
    pub ecn: f64,
    pub ecpm: Option<f64>,
    pub gini: f64,
    pub pot: f64,
}

fn check_dims(scores: &ScoreMatrix, num_users: usize, num_items: usize) -> Result<()> {
    if num_users != scores.num_users() {
        return Err(Error::DimensionMismatch {
            axis: "users",
            expected: scores.num_users(),
            found: num_users,
        });
    }
    if num_items != scores.num_items() {
        return Err(Error::DimensionMismatch {
            axis: "items",
            expected: scores.num_items(),
            found: num_items,
        });
    }
    Ok(())
}

/// Realized utility of every item under concrete ranking lists.
pub fn compute_utilities(
    scores: &ScoreMatrix,
    lists: &RankingLists,
    mode: Mode,
) -> Result<UtilityVector> {
    check_dims(scores, lists.num_users(), lists.num_items())?;
    let mut v = vec![0.0; scores.num_items()];
    for (u, list) in lists.lists().iter().enumerate() {
        for &i in list {
            v[i] += match mode {
                Mode::Exposure => 1.0,
                Mode::Ctr => scores.w()[[u, i]],
            };
        }
    }
    Ok(UtilityVector(v))
}

/// Expected utility of every item when lists are drawn with marginals `probs`.
pub fn expected_utilities(
    scores: &ScoreMatrix,
    probs: &RankingProbabilities,
    mode: Mode,
) -> Result<UtilityVector> {
    check_dims(scores, probs.num_users(), probs.num_items())?;
    let x = probs.matrix();
    let v = match mode {
        Mode::Exposure => probs.col_sums(),
        Mode::Ctr => (0..scores.num_items())
            .map(|i| {
                x.column(i)
                    .iter()
                    .zip(scores.w().column(i))
                    .map(|(p, w)| p * w)
                    .sum()
            })
            .collect(),
    };
    Ok(UtilityVector(v))
}
