//! Coverage-distance reward for a generated input `y` against the original
//! input `x` of a question.
//!
//! | case              | score                         |
//! |-------------------|-------------------------------|
//! | `identical_input` | 0.1 (`y == x`, checked first) |
//! | `inverted`        | 2 (`y` covers the desired direction) |
//! | `same_outcome`    | 1 (`y` covers only the observed direction) |
//! | `distance`        | `lcp(Tx, Ty) / len(Tx)`        |
//!
//! `Tx` is `x`'s function trace cut at the first execution of the branch;
//! `Ty` is `y`'s full trace.

mod service;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::coverage::{ExecutionFeedback, UncoveredBranch};
use crate::error::RewardError;

pub use service::{BoundService, RawRewardRequest, RewardRequest, RewardResponse, RewardService};

pub const SCORE_INVERTED: f64 = 2.0;
pub const SCORE_SAME_OUTCOME: f64 = 1.0;
pub const SCORE_IDENTICAL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardCase {
    Distance,
    SameOutcome,
    Inverted,
    IdenticalInput,
}

impl RewardCase {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardCase::Distance => "distance",
            RewardCase::SameOutcome => "same_outcome",
            RewardCase::Inverted => "inverted",
            RewardCase::IdenticalInput => "identical_input",
        }
    }
}

impl fmt::Display for RewardCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardOutcome {
    pub score: f64,
    pub case: RewardCase,
    /// Always computed, whatever the case.
    pub distance: f64,
    pub reached_function: bool,
    pub reached_site: bool,
}

pub fn lcp_length<A: AsRef<str>, B: AsRef<str>>(a: &[A], b: &[B]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x.as_ref() == y.as_ref()).count()
}

pub fn coverage_distance<A: AsRef<str>, B: AsRef<str>>(tx: &[A], ty: &[B]) -> Result<f64, RewardError> {
    if tx.is_empty() {
        return Err(RewardError::EmptyOriginalTrace);
    }
    Ok(lcp_length(tx, ty) as f64 / tx.len() as f64)
}

pub fn classify(branch: &UncoveredBranch, y: &ExecutionFeedback, x_bytes: &[u8], y_bytes: &[u8]) -> RewardCase {
    if x_bytes == y_bytes {
        RewardCase::IdenticalInput
    } else if y.covers(&branch.site, branch.desired) {
        RewardCase::Inverted
    } else if y.covers(&branch.site, branch.observed) {
        RewardCase::SameOutcome
    } else {
        RewardCase::Distance
    }
}

/// `x`'s trace up to the branch's first execution.
pub fn truncated_trace<'a>(branch: &UncoveredBranch, x: &'a ExecutionFeedback) -> &'a [String] {
    &x.trace[..branch.trace_prefix.min(x.trace.len())]
}

pub fn reward(
    branch: &UncoveredBranch,
    x: &ExecutionFeedback,
    y: &ExecutionFeedback,
    x_bytes: &[u8],
    y_bytes: &[u8],
) -> Result<RewardOutcome, RewardError> {
    if !x.covers(&branch.site, branch.observed) {
        return Err(RewardError::InconsistentOriginal(branch.observed_key().to_string()));
    }
    let distance = coverage_distance(truncated_trace(branch, x), &y.trace)?;
    let case = classify(branch, y, x_bytes, y_bytes);
    let score = match case {
        RewardCase::IdenticalInput => SCORE_IDENTICAL,
        RewardCase::Inverted => SCORE_INVERTED,
        RewardCase::SameOutcome => SCORE_SAME_OUTCOME,
        RewardCase::Distance => distance,
    };
    Ok(RewardOutcome {
        score,
        case,
        distance,
        reached_function: y.trace.contains(&branch.site.function),
        reached_site: y.reaches_site(&branch.site),
    })
}
