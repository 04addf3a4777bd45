//! Accuracy and inequality measures over item utilities.

use crate::error::{Error, Result};
use crate::types::UtilityVector;

/// Expected click (or exposure) number per user.
pub fn ecn(v: &UtilityVector, num_users: usize) -> Result<f64> {
    if num_users == 0 {
        return Err(Error::InvalidInput("num_users must be positive".into()));
    }
    Ok(v.total() / num_users as f64)
}

/// Bid-weighted utility per user.
pub fn ecpm(v: &UtilityVector, bids: Option<&[f64]>, num_users: usize) -> Result<f64> {
    let bids = bids.ok_or(Error::MissingBids)?;
    if bids.len() != v.0.len() {
        return Err(Error::DimensionMismatch {
            axis: "bids",
            expected: v.0.len(),
            found: bids.len(),
        });
    }
    if num_users == 0 {
        return Err(Error::InvalidInput("num_users must be positive".into()));
    }
    let revenue: f64 = bids.iter().zip(v.values()).map(|(b, x)| b * x).sum();
    Ok(revenue / num_users as f64)
}

/// Weighted utilities `gamma_i * v_i` sorted ascending, with their total.
fn sorted_weighted(v: &UtilityVector, gamma: &[f64]) -> Result<(Vec<f64>, f64)> {
    if gamma.len() != v.0.len() {
        return Err(Error::DimensionMismatch {
            axis: "gamma",
            expected: v.0.len(),
            found: gamma.len(),
        });
    }
    let mut s: Vec<f64> = v.values().iter().zip(gamma).map(|(x, g)| g * x).collect();
    if s.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidInput(
            "weighted utilities must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = s.iter().sum();
    if total <= 0.0 {
        return Err(Error::GiniUndefined);
    }
    s.sort_by(f64::total_cmp);
    Ok((s, total))
}

/// Gini index of the weighted utilities `gamma_i * v_i`.
///
/// Uses `sum_i (2i - n - 1) s_(i) / (n * sum s)` over ascending `s`, which
/// equals the mean-absolute-difference form `sum_ij |s_i - s_j| / (2 n sum s)`.
pub fn gini(v: &UtilityVector, gamma: &[f64]) -> Result<f64> {
    let (s, total) = sorted_weighted(v, gamma)?;
    let n = s.len() as f64;
    let weighted: f64 = s
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i + 1) as f64 - n - 1.0) * x)
        .sum();
    Ok((weighted / (n * total)).clamp(0.0, 1.0))
}

/// Lorenz curve: `(k / n, share of the k smallest weighted utilities)` for
/// `k = 0..=n`.
pub fn lorenz_points(v: &UtilityVector, gamma: &[f64]) -> Result<Vec<(f64, f64)>> {
    let (s, total) = sorted_weighted(v, gamma)?;
    let n = s.len();
    let mut points = Vec::with_capacity(n + 1);
    points.push((0.0, 0.0));
    let mut running = 0.0;
    for (k, x) in s.iter().enumerate() {
        running += x;
        let share = if k + 1 == n { 1.0 } else { running / total };
        points.push(((k + 1) as f64 / n as f64, share));
    }
    Ok(points)
}

/// Relative accuracy lost at a tax rate compared with the untaxed ranking.
pub fn pot(acc_at_zero: f64, acc_at_t: f64) -> Result<f64> {
    if !(acc_at_zero > 0.0) {
        return Err(Error::NonPositiveBaseline(acc_at_zero));
    }
    Ok((acc_at_zero - acc_at_t) / acc_at_zero)
}

/// Reference curve `1 - |U|^(-t / (1 + t))` with unit constant.
pub fn pot_bound(num_users: usize, t: f64) -> f64 {
    let u = num_users.max(1) as f64;
    let exponent = if t.is_infinite() { 1.0 } else { t / (1.0 + t) };
    1.0 - u.powf(-exponent)
}
