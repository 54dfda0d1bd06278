//! JSON coverage export written by external targets.
//!
//! ```json
//! { "trace": ["main", "parse"],
//!   "branches": [{ "file": "p.c", "line": 10, "column": 7, "function": "parse",
//!                  "condition": "c == ']'", "true_taken": false, "false_taken": true,
//!                  "stack": ["main", "parse"] }],
//!   "status": "ok" }
//! ```
//!
//! `status` is `ok`, `crash` or `timeout`; a crash may carry `crash_site`.
//! Optional extras: `trace_prefix` per branch, `wall_time_us` per document.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ProgramIndex;
use crate::coverage::{BranchOutcome, BranchSite, CrashInfo, ExecutionFeedback, ExitStatus, UncoveredBranch};
use crate::error::TargetError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageExport {
    pub trace: Vec<String>,
    pub branches: Vec<ExportBranch>,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crash_site: Option<ExportCrash>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_us: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportBranch {
    pub file: String,
    pub line: u32,
    pub column: u32,
    pub function: String,
    pub condition: String,
    pub true_taken: bool,
    pub false_taken: bool,
    /// Call stack at the site's first execution.
    #[serde(default)]
    pub stack: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_prefix: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportCrash {
    pub category: String,
    pub function: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<String>,
}

/// Converts an export document into feedback, checking every function it
/// names against `index`.
pub fn parse_coverage_export(raw: &[u8], index: &ProgramIndex) -> Result<ExecutionFeedback, TargetError> {
    let export: CoverageExport =
        serde_json::from_slice(raw).map_err(|e| TargetError::SchemaMismatch(e.to_string()))?;
    let known = |name: &str| -> Result<(), TargetError> {
        if index.functions.contains_key(name) {
            Ok(())
        } else {
            Err(TargetError::UnknownFunction(name.to_string()))
        }
    };

    for name in &export.trace {
        known(name)?;
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = export.trace.iter().find(|n| !seen.insert(n.as_str())) {
        return Err(TargetError::SchemaMismatch(format!("`{dup}` repeated in trace")));
    }

    let status = match export.status.as_str() {
        "ok" => ExitStatus::Ok,
        "timeout" => ExitStatus::Timeout,
        "crash" => {
            let info = match export.crash_site {
                Some(c) => CrashInfo::new(c.category, c.function, c.site),
                None => CrashInfo::new("unknown", export.trace.last().map_or("?", |s| s.as_str()), None),
            };
            ExitStatus::Crash(info)
        }
        other => return Err(TargetError::SchemaMismatch(format!("unknown status `{other}`"))),
    };

    let mut covered = BTreeSet::new();
    let mut uncovered = Vec::new();
    for b in export.branches {
        known(&b.function)?;
        for name in &b.stack {
            known(name)?;
        }
        let site = Arc::new(BranchSite {
            file: b.file,
            line: b.line,
            column: b.column,
            condition_text: b.condition,
            function: b.function,
        });
        for (taken, direction) in [(b.true_taken, true), (b.false_taken, false)] {
            if taken {
                covered.insert(BranchOutcome {
                    site: site.clone(),
                    direction,
                });
            }
        }
        if b.true_taken != b.false_taken {
            if b.stack.last() != Some(&site.function) {
                return Err(TargetError::SchemaMismatch(format!(
                    "{}: stack must end in `{}`",
                    site.location(),
                    site.function
                )));
            }
            let fallback = export.trace.iter().position(|f| *f == site.function).map_or(0, |p| p + 1);
            let prefix = b.trace_prefix.unwrap_or(fallback);
            uncovered.push(UncoveredBranch::new(site, b.true_taken, b.stack, prefix));
        }
    }
    uncovered.sort_by(|a, b| a.site.position().cmp(&b.site.position()));

    Ok(ExecutionFeedback {
        status,
        trace: export.trace,
        covered,
        uncovered,
        wall_time: Duration::from_micros(export.wall_time_us.unwrap_or(0)),
    })
}

/// Inverse of [`parse_coverage_export`] for feedback that satisfies
/// [`ExecutionFeedback::validate`].
pub fn to_export(fb: &ExecutionFeedback) -> CoverageExport {
    let mut branches: Vec<ExportBranch> = Vec::new();
    for o in &fb.covered {
        if let Some(last) = branches.last_mut() {
            if last.file == o.site.file && last.line == o.site.line && last.column == o.site.column {
                if o.direction {
                    last.true_taken = true;
                } else {
                    last.false_taken = true;
                }
                continue;
            }
        }
        branches.push(ExportBranch {
            file: o.site.file.clone(),
            line: o.site.line,
            column: o.site.column,
            function: o.site.function.clone(),
            condition: o.site.condition_text.clone(),
            true_taken: o.direction,
            false_taken: !o.direction,
            stack: Vec::new(),
            trace_prefix: None,
        });
    }
    for b in &mut branches {
        if let Some(ub) = fb
            .uncovered
            .iter()
            .find(|ub| ub.site.file == b.file && ub.site.line == b.line && ub.site.column == b.column)
        {
            b.stack = ub.call_stack.clone();
            b.trace_prefix = Some(ub.trace_prefix);
        }
    }
    let crash_site = match &fb.status {
        ExitStatus::Crash(c) => Some(ExportCrash {
            category: c.category.clone(),
            function: c.function.clone(),
            site: c.site.clone(),
        }),
        _ => None,
    };
    CoverageExport {
        trace: fb.trace.clone(),
        branches,
        status: fb.status.label().to_string(),
        crash_site,
        wall_time_us: Some(fb.wall_time.as_micros() as u64),
    }
}
