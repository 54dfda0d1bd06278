//! Branch-level coverage model shared by the dataset builder, the reward
//! engine and the fuzz loop.
//!
//! A branch is identified by its source position; a coverage key is a
//! `(site, direction)` pair rendered as `file:line:column:{T|F}`.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::CoverageError;

/// A conditional site in the target's source.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BranchSite {
    pub file: String,
    /// 1-based.
    pub line: u32,
    /// 1-based.
    pub column: u32,
    pub condition_text: String,
    /// Containing function.
    pub function: String,
}

impl BranchSite {
    pub fn key(&self, direction: bool) -> BranchKey {
        BranchKey {
            file: Arc::from(self.file.as_str()),
            line: self.line,
            column: self.column,
            direction,
        }
    }

    /// `file:line:column`
    pub fn location(&self) -> String {
        format!("{}:{}:{}", self.file, self.line, self.column)
    }

    pub(crate) fn position(&self) -> (&str, u32, u32) {
        (self.file.as_str(), self.line, self.column)
    }
}

/// Canonical coverage key: one direction of one branch site.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BranchKey {
    pub file: Arc<str>,
    pub line: u32,
    pub column: u32,
    pub direction: bool,
}

impl BranchKey {
    pub fn negated(&self) -> BranchKey {
        BranchKey {
            direction: !self.direction,
            ..self.clone()
        }
    }

    pub fn same_site(&self, site: &BranchSite) -> bool {
        &*self.file == site.file.as_str() && self.line == site.line && self.column == site.column
    }
}

impl fmt::Display for BranchKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = if self.direction { 'T' } else { 'F' };
        write!(f, "{}:{}:{}:{}", self.file, self.line, self.column, dir)
    }
}

impl FromStr for BranchKey {
    type Err = CoverageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CoverageError::MalformedKey(s.to_string());
        let mut parts = s.rsplitn(4, ':');
        let direction = match parts.next().ok_or_else(bad)? {
            "T" => true,
            "F" => false,
            _ => return Err(bad()),
        };
        let column = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let line = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let file = parts.next().filter(|f| !f.is_empty()).ok_or_else(bad)?;
        Ok(BranchKey {
            file: Arc::from(file),
            line,
            column,
            direction,
        })
    }
}

impl Serialize for BranchKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BranchKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Stable string key for one direction of a site: `file:line:column:{T|F}`.
pub fn branch_id(site: &BranchSite, direction: bool) -> String {
    site.key(direction).to_string()
}

/// One direction observed at one site during a run.
#[derive(Debug, Clone)]
pub struct BranchOutcome {
    pub site: Arc<BranchSite>,
    pub direction: bool,
}

impl BranchOutcome {
    pub fn key(&self) -> BranchKey {
        self.site.key(self.direction)
    }
}

impl PartialEq for BranchOutcome {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for BranchOutcome {}

impl PartialOrd for BranchOutcome {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for BranchOutcome {
    fn cmp(&self, other: &Self) -> Ordering {
        self.site
            .position()
            .cmp(&other.site.position())
            .then(self.direction.cmp(&other.direction))
    }
}

/// A site executed in only one direction during a run: the inversion target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UncoveredBranch {
    pub site: Arc<BranchSite>,
    pub observed: bool,
    pub desired: bool,
    /// Entry function first, `site.function` last; captured at the site's
    /// first execution in the originating run.
    pub call_stack: Vec<String>,
    /// Length of the function-entry trace when the site first executed.
    pub trace_prefix: usize,
}

impl UncoveredBranch {
    pub fn new(site: Arc<BranchSite>, observed: bool, call_stack: Vec<String>, trace_prefix: usize) -> Self {
        UncoveredBranch {
            site,
            observed,
            desired: !observed,
            call_stack,
            trace_prefix,
        }
    }

    /// Key of the direction the question asks for.
    pub fn desired_key(&self) -> BranchKey {
        self.site.key(self.desired)
    }

    pub fn observed_key(&self) -> BranchKey {
        self.site.key(self.observed)
    }

    pub fn check(&self) -> Result<(), CoverageError> {
        let loc = self.site.location();
        if self.desired == self.observed {
            return Err(CoverageError::Invariant(format!("{loc}: desired must negate observed")));
        }
        match self.call_stack.last() {
            None => Err(CoverageError::Invariant(format!("{loc}: empty call stack"))),
            Some(top) if *top != self.site.function => Err(CoverageError::Invariant(format!(
                "{loc}: call stack ends in `{top}`, expected `{}`",
                self.site.function
            ))),
            Some(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExitStatus {
    Ok,
    Crash(CrashInfo),
    Timeout,
}

impl ExitStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, ExitStatus::Ok)
    }

    pub fn label(&self) -> &'static str {
        match self {
            ExitStatus::Ok => "ok",
            ExitStatus::Crash(_) => "crash",
            ExitStatus::Timeout => "timeout",
        }
    }
}

/// Fault description. `dedup_hash` is derived from the faulting function and
/// the last guard site executed before the fault.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashInfo {
    pub category: String,
    pub function: String,
    /// `file:line:column` of the guard, when known.
    pub site: Option<String>,
    pub dedup_hash: String,
}

impl CrashInfo {
    pub fn new(category: impl Into<String>, function: impl Into<String>, site: Option<String>) -> Self {
        let function = function.into();
        let dedup_hash = crate::stable_hash(&[function.as_str(), site.as_deref().unwrap_or("?")]);
        CrashInfo {
            category: category.into(),
            function,
            site,
            dedup_hash,
        }
    }
}

/// Observation of one execution.
///
/// Equality ignores `wall_time`, so two runs of a deterministic target on the
/// same input compare equal.
#[derive(Debug, Clone)]
pub struct ExecutionFeedback {
    pub status: ExitStatus,
    /// Function names in first-entry order; each function appears once.
    pub trace: Vec<String>,
    pub covered: BTreeSet<BranchOutcome>,
    /// Sorted by site position.
    pub uncovered: Vec<UncoveredBranch>,
    pub wall_time: Duration,
}

impl PartialEq for ExecutionFeedback {
    fn eq(&self, other: &Self) -> bool {
        self.status == other.status
            && self.trace == other.trace
            && self.covered == other.covered
            && self.uncovered == other.uncovered
    }
}

impl ExecutionFeedback {
    pub fn covered_keys(&self) -> impl Iterator<Item = BranchKey> + '_ {
        self.covered.iter().map(BranchOutcome::key)
    }

    pub fn covers(&self, site: &BranchSite, direction: bool) -> bool {
        self.covered.iter().any(|o| {
            o.direction == direction && o.site.position() == site.position()
        })
    }

    pub fn reaches_site(&self, site: &BranchSite) -> bool {
        self.covers(site, true) || self.covers(site, false)
    }

    pub fn covers_key(&self, key: &BranchKey) -> bool {
        self.covered
            .iter()
            .any(|o| o.direction == key.direction && key.same_site(&o.site))
    }

    /// Checks the structural invariants every adapter must uphold.
    pub fn validate(&self, entry: &str) -> Result<(), CoverageError> {
        match self.trace.first() {
            Some(first) if first == entry => {}
            Some(first) => {
                return Err(CoverageError::Invariant(format!(
                    "trace starts with `{first}`, expected entry `{entry}`"
                )))
            }
            None if self.covered.is_empty() => {}
            None => return Err(CoverageError::Invariant("empty trace with coverage".into())),
        }
        let mut seen = BTreeSet::new();
        for name in &self.trace {
            if !seen.insert(name.as_str()) {
                return Err(CoverageError::Invariant(format!("`{name}` repeated in trace")));
            }
        }
        for ub in &self.uncovered {
            ub.check()?;
            if !self.covers(&ub.site, ub.observed) || self.covers(&ub.site, ub.desired) {
                return Err(CoverageError::Invariant(format!(
                    "{}: uncovered branch inconsistent with coverage",
                    ub.site.location()
                )));
            }
            if ub.trace_prefix == 0 || ub.trace_prefix > self.trace.len() {
                return Err(CoverageError::Invariant(format!(
                    "{}: trace prefix {} out of range",
                    ub.site.location(),
                    ub.trace_prefix
                )));
            }
        }
        Ok(())
    }
}

/// Accumulated coverage keys.
pub type CoverageSet = BTreeSet<BranchKey>;

/// `acc ∪ run.covered`.
pub fn merge_coverage(acc: &mut CoverageSet, run: &ExecutionFeedback) {
    acc.extend(run.covered_keys());
}

pub fn has_new_coverage(acc: &CoverageSet, run: &ExecutionFeedback) -> bool {
    run.covered_keys().any(|k| !acc.contains(&k))
}

/// Uncovered branches of `run` whose desired direction nobody has reached yet.
pub fn live_uncovered(run: &ExecutionFeedback, global: &CoverageSet) -> Vec<UncoveredBranch> {
    run.uncovered
        .iter()
        .filter(|ub| !global.contains(&ub.desired_key()))
        .cloned()
        .collect()
}
