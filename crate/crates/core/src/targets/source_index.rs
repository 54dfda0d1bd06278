//! Builds a [`ProgramIndex`] and a [`SiteTable`] for a toy target by scanning
//! its own source text.
//!
//! Instrumented functions are located by `fn NAME(` and delimited by brace
//! matching; branch sites are the `br!(` invocations inside them. Strings,
//! character literals and comments are masked out before matching.

use std::collections::BTreeMap;

use super::instrument::SiteTable;
use super::{CallSite, FunctionInfo, ProgramIndex};
use crate::coverage::BranchSite;

pub(crate) struct ScannedSource {
    pub index: ProgramIndex,
    pub table: SiteTable,
}

/// `true` for bytes that are code (outside literals and comments).
fn code_mask(src: &[u8]) -> Vec<bool> {
    let mut mask = vec![true; src.len()];
    let mut i = 0;
    while i < src.len() {
        match src[i] {
            b'/' if src.get(i + 1) == Some(&b'/') => {
                while i < src.len() && src[i] != b'\n' {
                    mask[i] = false;
                    i += 1;
                }
            }
            b'/' if src.get(i + 1) == Some(&b'*') => {
                let mut depth = 0;
                while i < src.len() {
                    if src[i..].starts_with(b"/*") {
                        depth += 1;
                        mask[i] = false;
                        mask[i + 1] = false;
                        i += 2;
                    } else if src[i..].starts_with(b"*/") {
                        depth -= 1;
                        mask[i] = false;
                        mask[i + 1] = false;
                        i += 2;
                        if depth == 0 {
                            break;
                        }
                    } else {
                        mask[i] = false;
                        i += 1;
                    }
                }
            }
            b'"' => {
                mask[i] = false;
                i += 1;
                while i < src.len() && src[i] != b'"' {
                    if src[i] == b'\\' {
                        mask[i] = false;
                        i += 1;
                    }
                    if i < src.len() {
                        mask[i] = false;
                        i += 1;
                    }
                }
                if i < src.len() {
                    mask[i] = false;
                    i += 1;
                }
            }
            b'\'' => {
                // 'x', '\n', '\'' are literals; anything else is a lifetime.
                let len = if src.get(i + 1) == Some(&b'\\') {
                    src[i + 2..].iter().position(|&c| c == b'\'').map(|p| p + 3)
                } else if src.get(i + 2) == Some(&b'\'') {
                    Some(3)
                } else {
                    None
                };
                match len {
                    Some(n) => {
                        mask[i..i + n].iter_mut().for_each(|m| *m = false);
                        i += n;
                    }
                    None => i += 1,
                }
            }
            _ => i += 1,
        }
    }
    mask
}

struct Lines {
    starts: Vec<usize>,
}

impl Lines {
    fn new(src: &[u8]) -> Lines {
        let mut starts = vec![0];
        starts.extend(src.iter().enumerate().filter(|(_, c)| **c == b'\n').map(|(i, _)| i + 1));
        Lines { starts }
    }

    /// 1-based (line, column) of a byte offset.
    fn position(&self, offset: usize) -> (u32, u32) {
        let line = self.starts.partition_point(|&s| s <= offset);
        let column = offset - self.starts[line - 1] + 1;
        (line as u32, column as u32)
    }
}

fn find_code(src: &[u8], mask: &[bool], pat: &[u8], from: usize, to: usize) -> Vec<usize> {
    let mut hits = Vec::new();
    if pat.is_empty() || to < pat.len() {
        return hits;
    }
    let mut i = from;
    while i + pat.len() <= to {
        if mask[i] && src[i..].starts_with(pat) {
            let word_start = pat[0].is_ascii_alphanumeric() || pat[0] == b'_';
            let boundary = !word_start
                || i == 0
                || !(src[i - 1].is_ascii_alphanumeric() || src[i - 1] == b'_');
            if boundary {
                hits.push(i);
            }
        }
        i += 1;
    }
    hits
}

/// Offset of the delimiter closing the one at `open`.
fn matching(src: &[u8], mask: &[bool], open: usize, l: u8, r: u8) -> usize {
    let mut depth = 0i32;
    for (i, c) in src.iter().enumerate().skip(open) {
        if !mask[i] {
            continue;
        }
        if *c == l {
            depth += 1;
        } else if *c == r {
            depth -= 1;
            if depth == 0 {
                return i;
            }
        }
    }
    panic!("unbalanced delimiter at offset {open}");
}

pub(crate) fn scan(file: &str, source: &str, functions: &[&str], entry: &str) -> ScannedSource {
    let src = source.as_bytes();
    let mask = code_mask(src);
    let lines = Lines::new(src);
    let line_text: Vec<&str> = source.lines().collect();

    // name -> (byte span, line span)
    let mut spans: Vec<(&str, usize, usize)> = Vec::new();
    let mut infos = BTreeMap::new();
    for name in functions {
        let pat = format!("fn {name}(");
        let start = *find_code(src, &mask, pat.as_bytes(), 0, src.len())
            .first()
            .unwrap_or_else(|| panic!("{file}: no definition for `{name}`"));
        let open = start + src[start..].iter().position(|&c| c == b'{').expect("fn body");
        let close = matching(src, &mask, open, b'{', b'}');
        let (start_line, _) = lines.position(start);
        let (end_line, _) = lines.position(close);
        let body = line_text[start_line as usize - 1..end_line as usize].join("\n");
        infos.insert(
            name.to_string(),
            FunctionInfo {
                file: file.to_string(),
                start_line,
                end_line,
                source: body,
                opaque: false,
            },
        );
        spans.push((name, start, close));
    }
    let owner = |offset: usize| {
        spans
            .iter()
            .filter(|(_, s, e)| *s <= offset && offset <= *e)
            .min_by_key(|(_, s, e)| e - s)
            .map(|(n, _, _)| *n)
    };

    let mut sites = Vec::new();
    for at in find_code(src, &mask, b"br!(", 0, src.len()) {
        let open = at + 3;
        let close = matching(src, &mask, open, b'(', b')');
        let inner = &source[open + 1..close];
        let cond = inner.split_once(',').map(|(_, c)| c).unwrap_or(inner);
        let condition_text = cond.split_whitespace().collect::<Vec<_>>().join(" ");
        let (line, column) = lines.position(at);
        let function = owner(at).unwrap_or_else(|| panic!("{file}:{line}: site outside any function"));
        sites.push(BranchSite {
            file: file.to_string(),
            line,
            column,
            condition_text,
            function: function.to_string(),
        });
    }

    let mut call_sites = Vec::new();
    for (caller, start, end) in &spans {
        for callee in functions {
            let pat = format!(".{callee}(");
            for at in find_code(src, &mask, pat.as_bytes(), *start, *end) {
                // Spans nest; attribute each call to its innermost function.
                if owner(at) == Some(*caller) {
                    call_sites.push(CallSite {
                        caller: caller.to_string(),
                        callee: callee.to_string(),
                        file: file.to_string(),
                        line: lines.position(at).0,
                    });
                }
            }
        }
    }
    call_sites.sort_by(|a, b| (a.line, &a.caller, &a.callee).cmp(&(b.line, &b.caller, &b.callee)));
    call_sites.dedup();

    ScannedSource {
        index: ProgramIndex {
            entry: entry.to_string(),
            functions: infos,
            call_sites,
            branches: sites.clone(),
        },
        table: SiteTable::new(sites),
    }
}
