//! Targets under test.
//!
//! A [`TargetAdapter`] executes one input and reports an
//! [`ExecutionFeedback`]. Two in-process interpreters are built in; anything
//! else runs as a subprocess that writes a coverage export file.

mod export;
mod external;
mod instrument;
mod minicalc;
mod minijson;
mod source_index;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::coverage::{BranchSite, ExecutionFeedback};
use crate::error::TargetError;

pub use export::{parse_coverage_export, to_export, CoverageExport, ExportBranch, ExportCrash};
pub use external::ExternalTarget;
pub use minicalc::{CalcDriver, MiniCalc};
pub use minijson::MiniJson;

/// Default per-execution wall-clock limit.
pub const DEFAULT_TIME_LIMIT: Duration = Duration::from_secs(1);

pub const BUILTIN_TARGETS: &[&str] = &["mini-calc", "mini-json"];

pub trait TargetAdapter: Send + Sync {
    fn name(&self) -> &str;

    /// Runs `input` once. Crashes and timeouts are reported in the feedback
    /// status; `Err` is reserved for failures of the adapter itself.
    fn execute(&self, input: &[u8], time_limit: Duration) -> Result<ExecutionFeedback, TargetError>;

    fn index(&self) -> &ProgramIndex;
}

impl<T: TargetAdapter + ?Sized> TargetAdapter for Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn execute(&self, input: &[u8], time_limit: Duration) -> Result<ExecutionFeedback, TargetError> {
        (**self).execute(input, time_limit)
    }

    fn index(&self) -> &ProgramIndex {
        (**self).index()
    }
}

pub fn execute(
    target: &dyn TargetAdapter,
    input: &[u8],
    time_limit: Duration,
) -> Result<ExecutionFeedback, TargetError> {
    if time_limit.is_zero() {
        return Err(TargetError::InvalidTimeLimit);
    }
    target.execute(input, time_limit)
}

pub fn builtin_target(name: &str) -> Result<Arc<dyn TargetAdapter>, TargetError> {
    match name {
        "mini-calc" => Ok(Arc::new(MiniCalc::new())),
        "mini-json" => Ok(Arc::new(MiniJson::new())),
        other => Err(TargetError::UnknownTarget(other.to_string())),
    }
}

/// Inputs that together take both directions of every site of a built-in
/// target. Sites that are dead under the default driver are toured with
/// [`CalcDriver::echo_source`] enabled; see `full_tour_covers_every_site`.
pub fn full_tour(name: &str) -> Option<Vec<Vec<u8>>> {
    match name {
        "mini-calc" => Some(minicalc::full_tour()),
        "mini-json" => Some(minijson::full_tour()),
        _ => None,
    }
}

/// Small starting corpora for the built-in targets.
pub fn default_seeds(name: &str) -> Option<&'static [&'static str]> {
    match name {
        "mini-calc" => Some(&["1+2;"]),
        "mini-json" => Some(&["[1,2]"]),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionInfo {
    pub file: String,
    pub start_line: u32,
    pub end_line: u32,
    #[serde(default)]
    pub source: String,
    /// Known to exist but without source (runtime or library frames).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub opaque: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallSite {
    pub caller: String,
    pub callee: String,
    pub file: String,
    pub line: u32,
}

/// Static context about a target: function bodies, call sites, entry point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramIndex {
    pub entry: String,
    pub functions: BTreeMap<String, FunctionInfo>,
    #[serde(default)]
    pub call_sites: Vec<CallSite>,
    /// Every instrumented site, when the indexer knows them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub branches: Vec<BranchSite>,
}

impl ProgramIndex {
    pub fn load_sidecar(path: &Path) -> Result<ProgramIndex, TargetError> {
        let raw = std::fs::read(path)?;
        let index: ProgramIndex = serde_json::from_slice(&raw)
            .map_err(|e| TargetError::InvalidIndex(format!("{}: {e}", path.display())))?;
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<(), TargetError> {
        if !self.functions.contains_key(&self.entry) {
            return Err(TargetError::InvalidIndex(format!(
                "entry `{}` is not a known function",
                self.entry
            )));
        }
        for cs in &self.call_sites {
            for name in [&cs.caller, &cs.callee] {
                if !self.functions.contains_key(name) {
                    return Err(TargetError::InvalidIndex(format!(
                        "call site {}:{} references unknown function `{name}`",
                        cs.file, cs.line
                    )));
                }
            }
        }
        for site in &self.branches {
            if !self.functions.contains_key(&site.function) {
                return Err(TargetError::InvalidIndex(format!(
                    "branch {} is in unknown function `{}`",
                    site.location(),
                    site.function
                )));
            }
        }
        Ok(())
    }

    /// Source of a function, unless it is unknown or opaque.
    pub fn body(&self, name: &str) -> Option<&FunctionInfo> {
        self.functions.get(name).filter(|f| !f.opaque)
    }

    pub fn contains_site(&self, site: &BranchSite) -> bool {
        self.branches
            .iter()
            .any(|b| b.file == site.file && b.line == site.line && b.column == site.column)
    }
}
