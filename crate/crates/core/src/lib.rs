//! Fair re-ranking by item taxation.
//!
//! The pipeline turns a user-item score matrix into top-`k` lists in three steps:
//!
//! 1. [`waterfill`] solves an alpha-fair exposure program over items, where the
//!    tax rate `t` moves the allocation from accuracy-first (`t = 0`) through
//!    proportional (`t = 1`) towards max-min (`t -> inf`).
//! 2. [`transport`] projects the exposure vector onto per-user inclusion
//!    probabilities with entropic optimal transport (Sinkhorn scaling).
//! 3. [`sampling`] draws `k` distinct items per user with exactly those
//!    inclusion probabilities.
//!
//! [`metrics`] measures the result, [`policies`] provides additive item-tax
//! baselines, [`io`] reads and writes CSV, and [`experiment`] composes sweeps.

pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod policies;
pub mod sampling;
pub mod transport;
pub mod types;
pub mod waterfill;

pub use error::{Error, Result};
pub use types::{
    compute_utilities, expected_utilities, ExposureVector, Mode, RankingConfig, RankingLists,
    RankingProbabilities, ScoreMatrix, TradeoffPoint, UtilityVector,
};
