//! Questions: the source slice along a branch's call stack plus a request to
//! invert the branch.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::coverage::UncoveredBranch;
use crate::error::SliceError;
use crate::targets::ProgramIndex;

pub const PROMPT_VERSION: &str = "v1";
const TEMPLATE: &str = include_str!("../resources/prompt_v1.txt");

/// Default prompt budget in characters.
pub const DEFAULT_PROMPT_BUDGET: usize = 24_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Every function on the call stack.
    FullTrace,
    /// Only the function that contains the branch.
    NoTrace,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::FullTrace => "full_trace",
            PromptMode::NoTrace => "no_trace",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full_trace" | "full-trace" => Ok(PromptMode::FullTrace),
            "no_trace" | "no-trace" => Ok(PromptMode::NoTrace),
            other => Err(format!("unknown prompt mode `{other}` (expected full_trace or no_trace)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub name: String,
    pub file: String,
    pub start_line: u32,
    pub end_line: u32,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    /// Hash of target, desired branch key and mode.
    pub id: String,
    pub target: String,
    pub branch: UncoveredBranch,
    pub prompt: String,
    #[serde(with = "b64_bytes")]
    pub original_input: Vec<u8>,
    pub mode: PromptMode,
    pub queried_count: u32,
    /// Logical time (campaign iteration or construction order), not wall time.
    pub created_at: u64,
}

pub fn question_id(target: &str, branch: &UncoveredBranch, mode: PromptMode) -> String {
    crate::stable_hash(&[target, &branch.desired_key().to_string(), mode.as_str()])
}

/// Function bodies along `branch.call_stack`, entry first, repeats collapsed.
/// Frames missing from the index or opaque are skipped.
pub fn extract_slice(branch: &UncoveredBranch, index: &ProgramIndex) -> Result<Vec<SliceEntry>, SliceError> {
    let target = &branch.site.function;
    if index.body(target).is_none() {
        return Err(SliceError::TargetFunctionMissing(target.clone()));
    }
    let mut seen = BTreeSet::new();
    let mut slice = Vec::new();
    for name in branch.call_stack.iter().chain(std::iter::once(target)) {
        if !seen.insert(name.as_str()) {
            continue;
        }
        match index.body(name) {
            Some(f) => slice.push(SliceEntry {
                name: name.clone(),
                file: f.file.clone(),
                start_line: f.start_line,
                end_line: f.end_line,
                source: f.source.clone(),
            }),
            None => log::warn!("skipping frame `{name}`: no source in the program index"),
        }
    }
    // The target closes the slice even if the stack revisits it later.
    if let Some(pos) = slice.iter().position(|e| e.name == *target) {
        let entry = slice.remove(pos);
        slice.push(entry);
    }
    Ok(slice)
}

struct Template {
    system: String,
    suffix: String,
}

fn template() -> &'static Template {
    static T: OnceLock<Template> = OnceLock::new();
    T.get_or_init(|| {
        let mut sections: Vec<(String, String)> = Vec::new();
        for line in TEMPLATE.lines() {
            if let Some(name) = line.strip_prefix("@@ ") {
                sections.push((name.trim().to_string(), String::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push_str(line);
                body.push('\n');
            }
        }
        let get = |name: &str| {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, b)| b.trim_end().to_string())
                .unwrap_or_else(|| panic!("prompt template lacks section {name}"))
        };
        Template {
            system: get("SYSTEM"),
            suffix: get("SUFFIX"),
        }
    })
}

/// Printable ASCII as is; everything else as an escape.
pub fn escape_input(bytes: &[u8]) -> String {
    bytes.iter().flat_map(|b| std::ascii::escape_default(*b)).map(char::from).collect()
}

fn outcome(direction: bool) -> &'static str {
    if direction {
        "True"
    } else {
        "False"
    }
}

fn render_body(entry: &SliceEntry) -> String {
    format!(
        "```\n// function: {} ({}:{}-{})\n{}\n```\n",
        entry.name, entry.file, entry.start_line, entry.end_line, entry.source
    )
}

fn render_suffix(branch: &UncoveredBranch, input: &[u8]) -> String {
    let original = format!(
        "text: \"{}\"\nbase64: {}",
        escape_input(input),
        crate::b64_encode(input)
    );
    template()
        .suffix
        .replace("{CONDITION}", &branch.site.condition_text)
        .replace("{FILE_LINE}", &format!("{}:{}", branch.site.file, branch.site.line))
        .replace("{OBSERVED}", outcome(branch.observed))
        .replace("{DESIRED}", outcome(branch.desired))
        .replace("{ORIGINAL_INPUT}", &original)
}

fn omission_note(dropped: usize) -> String {
    format!("// [{dropped} outer frame(s) omitted to fit the prompt budget]\n")
}

fn assemble(bodies: &[String], note: Option<&str>, suffix: &str) -> String {
    let mut out = String::new();
    out.push_str(&template().system);
    out.push_str("\n\n");
    if let Some(note) = note {
        out.push_str(note);
    }
    for b in bodies {
        out.push_str(b);
    }
    out.push('\n');
    out.push_str(suffix);
    out.push('\n');
    out
}

fn chars(s: &str) -> usize {
    s.chars().count()
}

/// Builds the prompt. Frames are dropped from the entry side until the
/// prompt fits in `budget` characters; the target function always stays.
pub fn render_question(
    target: &str,
    branch: &UncoveredBranch,
    slice: &[SliceEntry],
    original_input: &[u8],
    mode: PromptMode,
    budget: usize,
) -> Result<Question, SliceError> {
    let Some(last) = slice.last().filter(|e| e.name == branch.site.function) else {
        return Err(SliceError::TargetFunctionMissing(branch.site.function.clone()));
    };
    let frames: Vec<&SliceEntry> = match mode {
        PromptMode::FullTrace => slice.iter().collect(),
        PromptMode::NoTrace => vec![last],
    };
    let bodies: Vec<String> = frames.iter().map(|e| render_body(e)).collect();
    let suffix = render_suffix(branch, original_input);

    let mut start = 0;
    let mut prompt = assemble(&bodies, None, &suffix);
    while chars(&prompt) > budget {
        if start + 1 >= bodies.len() {
            let minimal = if bodies.len() > 1 {
                assemble(&bodies[bodies.len() - 1..], Some(&omission_note(bodies.len() - 1)), &suffix)
            } else {
                assemble(&bodies, None, &suffix)
            };
            return Err(SliceError::BudgetTooSmall {
                budget,
                required: chars(&minimal),
            });
        }
        start += 1;
        prompt = assemble(&bodies[start..], Some(&omission_note(start)), &suffix);
    }

    Ok(Question {
        id: question_id(target, branch, mode),
        target: target.to_string(),
        branch: branch.clone(),
        prompt,
        original_input: original_input.to_vec(),
        mode,
        queried_count: 0,
        created_at: 0,
    })
}

/// The fenced function bodies of a rendered prompt, in order.
pub fn code_bodies(prompt: &str) -> Vec<&str> {
    let open = "```\n// function: ";
    let mut out = Vec::new();
    let mut rest = prompt;
    while let Some(at) = rest.find(open) {
        let body = &rest[at + 4..];
        let end = body.find("\n```").unwrap_or(body.len());
        out.push(&body[..end]);
        rest = &body[end..];
    }
    out
}

/// `extract_slice` followed by `render_question`.
pub fn build_question(
    target: &str,
    branch: &UncoveredBranch,
    index: &ProgramIndex,
    original_input: &[u8],
    mode: PromptMode,
    budget: usize,
) -> Result<Question, SliceError> {
    let slice = extract_slice(branch, index)?;
    render_question(target, branch, &slice, original_input, mode, budget)
}

pub(crate) mod b64_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&crate::b64_encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        crate::b64_decode(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::BranchSite;
    use crate::targets::FunctionInfo;
    use proptest::prelude::*;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn index(names: &[&str], opaque: &[&str]) -> ProgramIndex {
        let functions = names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let start = 10 * i as u32 + 1;
                (
                    n.to_string(),
                    FunctionInfo {
                        file: "calc.c".into(),
                        start_line: start,
                        end_line: start + 2,
                        source: format!("int {n}(void) {{\n    /* body of {n} */\n}}"),
                        opaque: opaque.contains(n),
                    },
                )
            })
            .collect::<BTreeMap<_, _>>();
        ProgramIndex {
            entry: names[0].into(),
            functions,
            call_sites: vec![],
            branches: vec![],
        }
    }

    fn branch(stack: &[&str], observed: bool) -> UncoveredBranch {
        let function = stack.last().unwrap().to_string();
        let site = BranchSite {
            file: "calc.c".into(),
            line: 42,
            column: 9,
            condition_text: "rhs == 0".into(),
            function,
        };
        UncoveredBranch::new(
            Arc::new(site),
            observed,
            stack.iter().map(|s| s.to_string()).collect(),
            stack.len(),
        )
    }

    fn names(slice: &[SliceEntry]) -> Vec<&str> {
        slice.iter().map(|e| e.name.as_str()).collect()
    }

    const ALL: &[&str] = &["main", "run", "eval_stmt", "eval_expr", "eval_binop", "ext_callback", "f"];

    #[test]
    fn slice_follows_stack() {
        let idx = index(ALL, &["ext_callback"]);
        let s = extract_slice(&branch(&["main", "run", "eval_stmt", "eval_binop"], false), &idx).unwrap();
        assert_eq!(names(&s), ["main", "run", "eval_stmt", "eval_binop"]);
        let s = extract_slice(&branch(&["main", "eval_expr", "eval_expr", "eval_binop"], false), &idx).unwrap();
        assert_eq!(names(&s), ["main", "eval_expr", "eval_binop"]);
        let s = extract_slice(&branch(&["main", "ext_callback", "f"], false), &idx).unwrap();
        assert_eq!(names(&s), ["main", "f"]);
        let s = extract_slice(&branch(&["main", "unknown_rt", "f"], false), &idx).unwrap();
        assert_eq!(names(&s), ["main", "f"]);
    }

    #[test]
    fn missing_target_function() {
        let idx = index(&["main"], &[]);
        assert!(matches!(
            extract_slice(&branch(&["main", "gone"], true), &idx),
            Err(SliceError::TargetFunctionMissing(f)) if f == "gone"
        ));
    }

    fn body_count(prompt: &str) -> usize {
        prompt.matches("// function: ").count()
    }

    #[test]
    fn full_and_no_trace_prompts() {
        let idx = index(ALL, &[]);
        let b = branch(&["main", "run", "eval_stmt", "eval_binop"], false);
        let full = build_question("t", &b, &idx, b"1/0;", PromptMode::FullTrace, 100_000).unwrap();
        assert_eq!(body_count(&full.prompt), 4);
        let order: Vec<usize> = ["main", "run", "eval_stmt", "eval_binop"]
            .iter()
            .map(|n| full.prompt.find(&format!("// function: {n} ")).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
        assert!(full.prompt.contains("invert the branch condition `rhs == 0`'s outcome from False to True"));
        assert!(full.prompt.contains("calc.c:42"));
        assert!(full.prompt.contains("base64: MS8wOw=="));

        let none = build_question("t", &b, &idx, b"1/0;", PromptMode::NoTrace, 100_000).unwrap();
        assert_eq!(body_count(&none.prompt), 1);
        assert!(none.prompt.contains("// function: eval_binop "));
        assert!(none.prompt.len() <= full.prompt.len());
        assert_ne!(none.id, full.id);
        let fb = code_bodies(&full.prompt);
        assert_eq!(fb.len(), 4);
        assert_eq!(code_bodies(&none.prompt), &fb[3..]);
        assert!(fb[3].starts_with("// function: eval_binop "));
    }

    #[test]
    fn truncation_drops_entry_side() {
        let idx = index(ALL, &[]);
        let b = branch(&["main", "run", "eval_stmt", "eval_expr", "eval_binop"], true);
        let slice = extract_slice(&b, &idx).unwrap();
        let full = render_question("t", &b, &slice, b"x", PromptMode::FullTrace, usize::MAX).unwrap();
        let q = render_question("t", &b, &slice, b"x", PromptMode::FullTrace, chars(&full.prompt) - 1).unwrap();
        assert_eq!(body_count(&q.prompt), 4);
        assert!(!q.prompt.contains("// function: main "));
        assert!(q.prompt.contains("// function: run "));
        assert!(q.prompt.contains("1 outer frame(s) omitted"));
        assert!(q.prompt.contains("from True to False"));
    }

    #[test]
    fn budget_too_small() {
        let idx = index(ALL, &[]);
        let b = branch(&["main", "f"], true);
        match build_question("t", &b, &idx, b"x", PromptMode::FullTrace, 10) {
            Err(SliceError::BudgetTooSmall { budget: 10, required }) => {
                let q = build_question("t", &b, &idx, b"x", PromptMode::FullTrace, required).unwrap();
                assert_eq!(body_count(&q.prompt), 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn escaped_and_exact_input() {
        assert_eq!(escape_input(b"a\n\"\xff"), "a\\n\\\"\\xff");
        let idx = index(ALL, &[]);
        let b = branch(&["main", "f"], true);
        let q = build_question("t", &b, &idx, b"\x00\xfe", PromptMode::NoTrace, 100_000).unwrap();
        let json = serde_json::to_string(&q).unwrap();
        let back: Question = serde_json::from_str(&json).unwrap();
        assert_eq!(back, q);
    }

    proptest! {
        #[test]
        fn deterministic_and_monotone(
            depth in 1usize..6,
            budget in 0usize..6000,
            input in proptest::collection::vec(any::<u8>(), 0..40),
            observed: bool,
        ) {
            let idx = index(ALL, &[]);
            let stack = &["main", "run", "eval_stmt", "eval_expr", "eval_binop"][5 - depth..];
            let b = branch(stack, observed);
            let target_body = idx.functions[&b.site.function].source.clone();
            let a = build_question("t", &b, &idx, &input, PromptMode::FullTrace, budget);
            let again = build_question("t", &b, &idx, &input, PromptMode::FullTrace, budget);
            match (a, again) {
                (Ok(a), Ok(again)) => {
                    prop_assert_eq!(&a, &again);
                    prop_assert!(chars(&a.prompt) <= budget);
                    prop_assert_eq!(a.prompt.matches(target_body.as_str()).count(), 1);
                    prop_assert!(a.prompt.contains("Generate a new input to invert"));
                    let no = build_question("t", &b, &idx, &input, PromptMode::NoTrace, usize::MAX).unwrap();
                    prop_assert!(chars(&no.prompt) <= chars(
                        &build_question("t", &b, &idx, &input, PromptMode::FullTrace, usize::MAX).unwrap().prompt));
                }
                (Err(SliceError::BudgetTooSmall { required, .. }), Err(_)) => {
                    prop_assert!(required > budget);
                }
                other => prop_assert!(false, "{:?}", other),
            }
        }
    }
}
