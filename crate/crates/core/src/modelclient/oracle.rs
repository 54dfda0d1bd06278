use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use regex::Regex;

use super::{fence_answer, CompletionParams, ModelClient};
use crate::coverage::{BranchKey, BranchSite};
use crate::error::ModelError;
use crate::targets::{TargetAdapter, DEFAULT_TIME_LIMIT};

pub const NO_SOLUTION: &str = "no solution found";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleSearch {
    /// Tokens that candidate inputs are built from.
    pub alphabet: Vec<Vec<u8>>,
    /// Longest token sequence enumerated from scratch.
    pub max_len: usize,
    /// Executions allowed per question.
    pub budget: usize,
}

impl OracleSearch {
    pub fn new(alphabet: &[&str], max_len: usize, budget: usize) -> Self {
        OracleSearch {
            alphabet: alphabet.iter().map(|t| t.as_bytes().to_vec()).collect(),
            max_len,
            budget,
        }
    }

    /// A token set suited to a built-in target, or single printable bytes.
    pub fn for_target(name: &str, budget: usize) -> Self {
        match name {
            "mini-calc" => Self::new(
                &[
                    "1", "0", "2", "x", "+", "-", "*", "/", "%", "<", "==", "=", "(", ")", ";", " ", "print ",
                    "let ", "if ", " then ", " else ", " end", "while ", " do ", "42",
                ],
                4,
                budget,
            ),
            "mini-json" => Self::new(
                &[
                    "1", "0", "-", ".", "e", "+", "\"", "\\", "u", "a", "[", "]", "{", "}", ":", ",", " ",
                    "true", "null", "\\u0041", "\\ud800",
                ],
                4,
                budget,
            ),
            _ => {
                let printable: Vec<String> = (0x20u8..0x7f).map(|b| (b as char).to_string()).collect();
                let refs: Vec<&str> = printable.iter().map(String::as_str).collect();
                Self::new(&refs, 3, budget)
            }
        }
    }
}

/// A stand-in "perfect model": reads the branch out of the prompt and
/// searches for an input that takes the desired direction.
///
/// Single-token edits of the original input are tried first, then every
/// token sequence up to `max_len`, shortest first. Every returned answer has
/// been executed and verified.
pub struct OracleClient {
    target: Arc<dyn TargetAdapter>,
    search: OracleSearch,
    time_limit: Duration,
    solved: Mutex<HashMap<BranchKey, Vec<u8>>>,
    failed: Mutex<HashSet<(BranchKey, Vec<u8>)>>,
    patterns: Patterns,
}

struct Patterns {
    location: Regex,
    request: Regex,
    original: Regex,
}

struct Ask {
    site: BranchSite,
    desired: bool,
    original: Vec<u8>,
}

impl OracleClient {
    pub fn new(target: Arc<dyn TargetAdapter>, search: OracleSearch) -> Self {
        OracleClient {
            target,
            search,
            time_limit: DEFAULT_TIME_LIMIT,
            solved: Mutex::new(HashMap::new()),
            failed: Mutex::new(HashSet::new()),
            patterns: Patterns {
                location: Regex::new(r"(?m)^Target branch: `.*` at (.+):(\d+)\.$").expect("valid regex"),
                request: Regex::new(r"(?m)^Generate a new input to invert the branch condition `(.*)`'s outcome from (True|False) to (True|False)\.?$")
                    .expect("valid regex"),
                original: Regex::new(r"(?m)^base64: (\S*)$").expect("valid regex"),
            },
        }
    }

    fn parse(&self, prompt: &str) -> Result<Ask, String> {
        let loc = self.patterns.location.captures(prompt).ok_or("no branch location in prompt")?;
        let req = self.patterns.request.captures(prompt).ok_or("no inversion request in prompt")?;
        let orig = self.patterns.original.captures(prompt).ok_or("no original input in prompt")?;
        let file = &loc[1];
        let line: u32 = loc[2].parse().map_err(|_| "bad line number")?;
        let condition = &req[1];
        let desired = &req[3] == "True";
        let original = crate::b64_decode(&orig[1]).map_err(|e| format!("bad original input: {e}"))?;
        let site = self
            .target
            .index()
            .branches
            .iter()
            .find(|b| b.file == file && b.line == line && b.condition_text == condition)
            .cloned()
            .ok_or_else(|| format!("no indexed site `{condition}` at {file}:{line}"))?;
        Ok(Ask {
            site,
            desired,
            original,
        })
    }

    fn hits(&self, input: &[u8], site: &BranchSite, desired: bool) -> bool {
        self.target
            .execute(input, self.time_limit)
            .is_ok_and(|fb| fb.covers(site, desired))
    }

    fn search(&self, ask: &Ask) -> Option<Vec<u8>> {
        let mut budget = self.search.budget;
        let mut attempt = |candidate: &[u8]| -> Option<bool> {
            if budget == 0 {
                return None;
            }
            budget -= 1;
            Some(self.hits(candidate, &ask.site, ask.desired))
        };
        let alphabet = &self.search.alphabet;
        let x = &ask.original;

        for p in 0..=x.len() {
            for tok in alphabet {
                let inserted = [&x[..p], tok, &x[p..]].concat();
                if attempt(&inserted)? {
                    return Some(inserted);
                }
            }
        }
        for p in 0..x.len() {
            let deleted = [&x[..p], &x[p + 1..]].concat();
            if attempt(&deleted)? {
                return Some(deleted);
            }
            for tok in alphabet {
                let replaced = [&x[..p], tok, &x[p + 1..]].concat();
                if attempt(&replaced)? {
                    return Some(replaced);
                }
            }
        }

        // Odometer over token indices, shortest sequences first.
        if alphabet.is_empty() {
            return None;
        }
        for len in 1..=self.search.max_len {
            let mut digits = vec![0usize; len];
            'sequences: loop {
                let candidate: Vec<u8> = digits.iter().flat_map(|&d| alphabet[d].iter().copied()).collect();
                if attempt(&candidate)? {
                    return Some(candidate);
                }
                let mut i = len;
                loop {
                    if i == 0 {
                        break 'sequences;
                    }
                    i -= 1;
                    digits[i] += 1;
                    if digits[i] < alphabet.len() {
                        break;
                    }
                    digits[i] = 0;
                }
            }
        }
        None
    }

    pub fn solve_prompt(&self, prompt: &str) -> Result<Option<Vec<u8>>, String> {
        let ask = self.parse(prompt)?;
        let key = ask.site.key(ask.desired);
        if let Some(hit) = self.solved.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(Some(hit.clone()));
        }
        let failure_key = (key.clone(), ask.original.clone());
        if self.failed.lock().unwrap_or_else(|e| e.into_inner()).contains(&failure_key) {
            return Ok(None);
        }
        match self.search(&ask) {
            Some(answer) => {
                self.solved.lock().unwrap_or_else(|e| e.into_inner()).insert(key, answer.clone());
                Ok(Some(answer))
            }
            None => {
                self.failed.lock().unwrap_or_else(|e| e.into_inner()).insert(failure_key);
                Ok(None)
            }
        }
    }
}

impl ModelClient for OracleClient {
    fn name(&self) -> &str {
        "oracle"
    }

    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<Vec<String>, ModelError> {
        if params.attempts == 0 {
            return Ok(Vec::new());
        }
        let text = match self.solve_prompt(prompt) {
            Ok(Some(answer)) => fence_answer(&answer),
            Ok(None) => NO_SOLUTION.to_string(),
            Err(why) => format!("{NO_SOLUTION}: {why}"),
        };
        Ok(vec![text])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slicer::{build_question, PromptMode};
    use crate::targets::{builtin_target, MiniCalc};

    fn question_prompt(target: &dyn TargetAdapter, input: &[u8], pick: impl Fn(&BranchSite) -> bool) -> (String, BranchKey) {
        let fb = target.execute(input, DEFAULT_TIME_LIMIT).unwrap();
        let ub = fb.uncovered.iter().find(|u| pick(&u.site)).expect("branch").clone();
        let q = build_question(target.name(), &ub, target.index(), input, PromptMode::FullTrace, 100_000).unwrap();
        (q.prompt, ub.desired_key())
    }

    #[test]
    fn answers_are_verified() {
        let t = builtin_target("mini-calc").unwrap();
        let oracle = OracleClient::new(t.clone(), OracleSearch::for_target("mini-calc", 20_000));
        let (prompt, key) = question_prompt(t.as_ref(), b"print 6/2;", |s| s.condition_text == "rhs == 0");
        let answer = oracle.solve_prompt(&prompt).unwrap().expect("solvable");
        let fb = t.execute(&answer, DEFAULT_TIME_LIMIT).unwrap();
        assert!(fb.covers_key(&key));
        let out = oracle.complete(&prompt, &CompletionParams::default()).unwrap();
        assert_eq!(out, [fence_answer(&answer)]);
    }

    #[test]
    fn dead_branch_and_zero_budget() {
        let t: Arc<dyn TargetAdapter> = Arc::new(MiniCalc::new());
        // The echo branch is dead under the default driver.
        let (prompt, _) = question_prompt(t.as_ref(), b"1;", |s| s.condition_text == "s.driver.echo_source");
        let oracle = OracleClient::new(t.clone(), OracleSearch::for_target("mini-calc", 3_000));
        let out = oracle.complete(&prompt, &CompletionParams::default()).unwrap();
        assert_eq!(out, [NO_SOLUTION]);

        let (prompt, _) = question_prompt(t.as_ref(), b"print 6/2;", |s| s.condition_text == "rhs == 0");
        let broke = OracleClient::new(t, OracleSearch::for_target("mini-calc", 0));
        assert_eq!(broke.complete(&prompt, &CompletionParams::default()).unwrap(), [NO_SOLUTION]);
    }
}
