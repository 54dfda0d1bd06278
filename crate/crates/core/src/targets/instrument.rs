//! Runtime recorder for the in-process toy targets.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::coverage::{
    BranchOutcome, BranchSite, CrashInfo, ExecutionFeedback, ExitStatus, UncoveredBranch,
};

/// Ticks allowed per execution before the run is declared a timeout.
pub(crate) const DEFAULT_FUEL: u64 = 200_000;

/// Records one direction at an indexed site and yields the condition value.
macro_rules! br {
    ($s:ident, $cond:expr) => {{
        let taken: bool = $cond;
        $s.rec.branch(line!(), column!(), taken)
    }};
}
pub(crate) use br;

/// All instrumented sites of one source file.
#[derive(Debug)]
pub(crate) struct SiteTable {
    pub sites: Vec<Arc<BranchSite>>,
    by_pos: HashMap<(u32, u32), usize>,
}

impl SiteTable {
    pub fn new(sites: Vec<BranchSite>) -> SiteTable {
        let sites: Vec<_> = sites.into_iter().map(Arc::new).collect();
        let by_pos = sites
            .iter()
            .enumerate()
            .map(|(i, s)| ((s.line, s.column), i))
            .collect();
        SiteTable { sites, by_pos }
    }

    fn lookup(&self, line: u32, column: u32) -> usize {
        match self.by_pos.get(&(line, column)) {
            Some(i) => *i,
            None => panic!("branch at {line}:{column} is not in the site table"),
        }
    }
}

/// Non-local exits of a toy interpreter.
#[derive(Debug)]
pub(crate) enum Halt {
    /// Input rejected by the target; a normal, successful run.
    Reject(#[allow(dead_code)] String),
    Timeout,
    Crash(CrashInfo),
}

pub(crate) type Step<T> = Result<T, Halt>;

pub(crate) fn reject<T>(reason: impl Into<String>) -> Step<T> {
    Err(Halt::Reject(reason.into()))
}

struct FirstHit {
    direction: bool,
    stack: Vec<&'static str>,
    trace_len: usize,
}

pub(crate) struct Recorder<'t> {
    table: &'t SiteTable,
    stack: Vec<&'static str>,
    trace: Vec<&'static str>,
    /// bit 0: true taken, bit 1: false taken
    seen: Vec<u8>,
    first: Vec<Option<FirstHit>>,
    last_site: Option<usize>,
    fuel: u64,
    ticks: u64,
    started: Instant,
    deadline: Instant,
}

impl<'t> Recorder<'t> {
    pub fn new(table: &'t SiteTable, time_limit: Duration, fuel: u64) -> Self {
        let started = Instant::now();
        Recorder {
            table,
            stack: Vec::with_capacity(16),
            trace: Vec::with_capacity(16),
            seen: vec![0; table.sites.len()],
            first: (0..table.sites.len()).map(|_| None).collect(),
            last_site: None,
            fuel,
            ticks: 0,
            started,
            deadline: started + time_limit,
        }
    }

    pub fn tick(&mut self) -> Step<()> {
        self.ticks += 1;
        if self.ticks > self.fuel {
            return Err(Halt::Timeout);
        }
        if self.ticks.is_multiple_of(64) && Instant::now() >= self.deadline {
            return Err(Halt::Timeout);
        }
        Ok(())
    }

    pub fn enter(&mut self, name: &'static str) -> Step<()> {
        self.tick()?;
        self.stack.push(name);
        if !self.trace.contains(&name) {
            self.trace.push(name);
        }
        Ok(())
    }

    pub fn exit(&mut self) {
        self.stack.pop();
    }

    pub fn branch(&mut self, line: u32, column: u32, taken: bool) -> bool {
        let idx = self.table.lookup(line, column);
        self.seen[idx] |= if taken { 1 } else { 2 };
        if self.first[idx].is_none() {
            self.first[idx] = Some(FirstHit {
                direction: taken,
                stack: self.stack.clone(),
                trace_len: self.trace.len(),
            });
        }
        self.last_site = Some(idx);
        taken
    }

    /// A fault at the current position.
    pub fn trap(&self, category: &str) -> Halt {
        let function = self.stack.last().copied().unwrap_or("?");
        let site = self.last_site.map(|i| self.table.sites[i].location());
        Halt::Crash(CrashInfo::new(category, function, site))
    }

    pub fn finish(self, halt: Option<Halt>) -> ExecutionFeedback {
        let status = match halt {
            None | Some(Halt::Reject(_)) => ExitStatus::Ok,
            Some(Halt::Timeout) => ExitStatus::Timeout,
            Some(Halt::Crash(info)) => ExitStatus::Crash(info),
        };
        let mut covered = std::collections::BTreeSet::new();
        let mut uncovered = Vec::new();
        for (idx, bits) in self.seen.iter().enumerate() {
            let site = &self.table.sites[idx];
            for (bit, direction) in [(1u8, true), (2u8, false)] {
                if bits & bit != 0 {
                    covered.insert(BranchOutcome {
                        site: site.clone(),
                        direction,
                    });
                }
            }
            if *bits == 1 || *bits == 2 {
                let hit = self.first[idx].as_ref().expect("seen site has a first hit");
                uncovered.push(UncoveredBranch::new(
                    site.clone(),
                    hit.direction,
                    hit.stack.iter().map(|s| s.to_string()).collect(),
                    hit.trace_len,
                ));
            }
        }
        uncovered.sort_by(|a, b| {
            (a.site.file.as_str(), a.site.line, a.site.column)
                .cmp(&(b.site.file.as_str(), b.site.line, b.site.column))
        });
        ExecutionFeedback {
            status,
            trace: self.trace.iter().map(|s| s.to_string()).collect(),
            covered,
            uncovered,
            wall_time: self.started.elapsed(),
        }
    }
}
