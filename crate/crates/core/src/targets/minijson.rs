//! `mini-json`: a strict JSON validator.
//!
//! Nesting deeper than [`MAX_DEPTH`] and lone UTF-16 surrogates in `\u`
//! escapes trap (reported as crashes); every other malformed document is
//! rejected normally.

use std::sync::OnceLock;
use std::time::Duration;

use super::instrument::{br, reject, Recorder, Step, DEFAULT_FUEL};
use super::source_index::{scan, ScannedSource};
use super::{ProgramIndex, TargetAdapter};
use crate::coverage::ExecutionFeedback;
use crate::error::TargetError;

const FILE: &str = "minijson.rs";
const SOURCE: &str = include_str!("minijson.rs");
const FUNCTIONS: &[&str] = &[
    "main",
    "parse_document",
    "lex",
    "parse_value",
    "parse_string",
    "parse_number",
    "parse_array",
    "parse_object",
];

pub const MAX_DEPTH: usize = 16;

pub(crate) fn full_tour() -> Vec<Vec<u8>> {
    let mut tour: Vec<Vec<u8>> = TOUR.iter().map(|s| s.as_bytes().to_vec()).collect();
    tour.push(vec![b'"', 0xff, b'"']);
    tour.push(format!("{}1{}", "[".repeat(MAX_DEPTH + 1), "]".repeat(MAX_DEPTH + 1)).into_bytes());
    tour
}

const TOUR: &[&str] = &[
    "[1,2]",
    "[1,2",
    "[ ]",
    "{}",
    "{\"a\":1,\"b\":[true,false,null]}",
    "{\"a\":1,\"a\":2}",
    "{1:2}",
    "{\"a\" 1}",
    "{\"a\":1 \"b\":2}",
    "\"xA\\n\\\"\"",
    "\"\\ud800\"",
    "\"\\uzzzz\"",
    "\"\\u0041\"",
    "\"\\q\"",
    "\"a\u{1}b\"",
    "\"abc",
    "-1.5e+3",
    "1E5",
    "-",
    "012",
    "1.",
    "1e",
    "",
    " ",
    "1 2",
    "@",
    "nul",
];

fn scanned() -> &'static ScannedSource {
    static SCANNED: OnceLock<ScannedSource> = OnceLock::new();
    SCANNED.get_or_init(|| scan(FILE, SOURCE, FUNCTIONS, "main"))
}

#[derive(Debug, Clone, Default)]
pub struct MiniJson;

impl MiniJson {
    pub fn new() -> Self {
        MiniJson
    }
}

impl TargetAdapter for MiniJson {
    fn name(&self) -> &str {
        "mini-json"
    }

    fn execute(&self, input: &[u8], time_limit: Duration) -> Result<ExecutionFeedback, TargetError> {
        if time_limit.is_zero() {
            return Err(TargetError::InvalidTimeLimit);
        }
        let mut json = Json {
            rec: Recorder::new(&scanned().table, time_limit, DEFAULT_FUEL),
            src: input,
            pos: 0,
            depth: 0,
        };
        let halt = json.main().err();
        Ok(json.rec.finish(halt))
    }

    fn index(&self) -> &ProgramIndex {
        &scanned().index
    }
}

struct Json<'a> {
    rec: Recorder<'static>,
    src: &'a [u8],
    pos: usize,
    depth: usize,
}

impl Json<'_> {
    fn call<T>(&mut self, name: &'static str, body: impl FnOnce(&mut Self) -> Step<T>) -> Step<T> {
        self.rec.enter(name)?;
        let out = body(self);
        self.rec.exit();
        out
    }

    fn skip_digits(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
    }

    fn main(&mut self) -> Step<()> {
        self.call("main", |s| {
            if br!(s, s.src.is_empty()) {
                return reject("empty document");
            }
            if br!(s, std::str::from_utf8(s.src).is_err()) {
                return reject("document is not UTF-8");
            }
            s.parse_document()
        })
    }

    fn parse_document(&mut self) -> Step<()> {
        self.call("parse_document", |s| {
            s.parse_value()?;
            let rest = s.lex()?;
            if br!(s, rest.is_some()) {
                return reject("trailing characters");
            }
            Ok(())
        })
    }

    /// Skips whitespace and peeks at the next byte.
    fn lex(&mut self) -> Step<Option<u8>> {
        self.call("lex", |s| {
            while br!(s, s.pos < s.src.len() && matches!(s.src[s.pos], b' ' | b'\t' | b'\n' | b'\r')) {
                s.pos += 1;
            }
            if br!(s, s.pos >= s.src.len()) {
                return Ok(None);
            }
            Ok(Some(s.src[s.pos]))
        })
    }

    fn parse_value(&mut self) -> Step<()> {
        self.call("parse_value", |s| {
            s.depth += 1;
            if br!(s, s.depth > MAX_DEPTH) {
                return Err(s.rec.trap("stack-exhaustion"));
            }
            let next = s.lex()?;
            if br!(s, next.is_none()) {
                return reject("unexpected end of input");
            }
            let c = next.unwrap_or(0);
            if br!(s, c == b'{') {
                s.parse_object()?;
            } else if br!(s, c == b'[') {
                s.parse_array()?;
            } else if br!(s, c == b'"') {
                s.parse_string()?;
            } else if br!(s, c == b'-' || c.is_ascii_digit()) {
                s.parse_number()?;
            } else if br!(s, s.src[s.pos..].starts_with(b"true") || s.src[s.pos..].starts_with(b"false")) {
                s.pos += if c == b't' { 4 } else { 5 };
            } else if br!(s, s.src[s.pos..].starts_with(b"null")) {
                s.pos += 4;
            } else {
                return reject("unexpected character");
            }
            s.depth -= 1;
            Ok(())
        })
    }

    fn parse_string(&mut self) -> Step<String> {
        self.call("parse_string", |s| {
            s.pos += 1;
            let mut text = String::new();
            loop {
                s.rec.tick()?;
                if br!(s, s.pos >= s.src.len()) {
                    return reject("unterminated string");
                }
                let c = s.src[s.pos];
                s.pos += 1;
                if br!(s, c == b'"') {
                    return Ok(text);
                }
                if br!(s, c < 0x20) {
                    return reject("control character in string");
                }
                if br!(s, c == b'\\') {
                    let esc = s.src.get(s.pos).copied();
                    s.pos += 1;
                    if br!(s, esc == Some(b'u')) {
                        let code = s
                            .src
                            .get(s.pos..s.pos + 4)
                            .filter(|h| h.iter().all(u8::is_ascii_hexdigit))
                            .and_then(|h| std::str::from_utf8(h).ok())
                            .and_then(|h| u32::from_str_radix(h, 16).ok());
                        if br!(s, code.is_none()) {
                            return reject("malformed unicode escape");
                        }
                        let code = code.unwrap_or_default();
                        s.pos += 4;
                        if br!(s, (0xD800..=0xDFFF).contains(&code)) {
                            return Err(s.rec.trap("lone-surrogate"));
                        }
                        text.push(char::from_u32(code).unwrap_or('?'));
                        continue;
                    }
                    if br!(s, esc.is_some_and(|e| b"\"\\/bfnrt".contains(&e))) {
                        text.push(esc.map(char::from).unwrap_or('?'));
                        continue;
                    }
                    return reject("unknown escape");
                }
                text.push(char::from(c));
            }
        })
    }

    fn parse_number(&mut self) -> Step<()> {
        self.call("parse_number", |s| {
            if br!(s, s.src[s.pos] == b'-') {
                s.pos += 1;
            }
            let int_start = s.pos;
            s.skip_digits();
            let int_len = s.pos - int_start;
            if br!(s, int_len == 0) {
                return reject("missing integer digits");
            }
            if br!(s, int_len > 1 && s.src[int_start] == b'0') {
                return reject("leading zero");
            }
            if br!(s, s.src.get(s.pos) == Some(&b'.')) {
                s.pos += 1;
                let frac_start = s.pos;
                s.skip_digits();
                if br!(s, s.pos == frac_start) {
                    return reject("missing fraction digits");
                }
            }
            if br!(s, matches!(s.src.get(s.pos), Some(b'e' | b'E'))) {
                s.pos += 1;
                if br!(s, matches!(s.src.get(s.pos), Some(b'+' | b'-'))) {
                    s.pos += 1;
                }
                let exp_start = s.pos;
                s.skip_digits();
                if br!(s, s.pos == exp_start) {
                    return reject("missing exponent digits");
                }
            }
            Ok(())
        })
    }

    fn parse_array(&mut self) -> Step<()> {
        self.call("parse_array", |s| {
            s.pos += 1;
            if br!(s, s.lex()? == Some(b']')) {
                s.pos += 1;
                return Ok(());
            }
            loop {
                s.parse_value()?;
                let next = s.lex()?;
                if br!(s, next == Some(b',')) {
                    s.pos += 1;
                    continue;
                }
                if br!(s, next == Some(b']')) {
                    s.pos += 1;
                    return Ok(());
                }
                return reject("expected `,` or `]`");
            }
        })
    }

    fn parse_object(&mut self) -> Step<()> {
        self.call("parse_object", |s| {
            s.pos += 1;
            let mut keys: Vec<String> = Vec::new();
            if br!(s, s.lex()? == Some(b'}')) {
                s.pos += 1;
                return Ok(());
            }
            loop {
                if br!(s, s.lex()? != Some(b'"')) {
                    return reject("expected a string key");
                }
                let key = s.parse_string()?;
                if br!(s, keys.contains(&key)) {
                    return reject("duplicate key");
                }
                keys.push(key);
                if br!(s, s.lex()? != Some(b':')) {
                    return reject("expected `:`");
                }
                s.pos += 1;
                s.parse_value()?;
                let next = s.lex()?;
                if br!(s, next == Some(b',')) {
                    s.pos += 1;
                    continue;
                }
                if br!(s, next == Some(b'}')) {
                    s.pos += 1;
                    return Ok(());
                }
                return reject("expected `,` or `}`");
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::ExitStatus;

    fn run(input: &[u8]) -> ExecutionFeedback {
        MiniJson::new().execute(input, Duration::from_secs(1)).unwrap()
    }

    fn closing_bracket_site() -> &'static crate::coverage::BranchSite {
        scanned()
            .index
            .branches
            .iter()
            .find(|b| b.function == "parse_array" && b.condition_text == "next == Some(b']')")
            .expect("closing-bracket site")
    }

    #[test]
    fn well_formed_array() {
        let fb = run(b"[1,2]");
        assert_eq!(fb.status, ExitStatus::Ok);
        assert!(fb.covers(closing_bracket_site(), true));
    }

    #[test]
    fn unclosed_array_leaves_closing_bracket_uncovered() {
        let fb = run(b"[1,2");
        assert_eq!(fb.status, ExitStatus::Ok);
        let site = closing_bracket_site();
        let ub = fb
            .uncovered
            .iter()
            .find(|ub| ub.site.as_ref() == site)
            .expect("closing bracket uncovered");
        assert!(!ub.observed);
        assert!(ub.desired);
        assert_eq!(ub.call_stack, ["main", "parse_document", "parse_value", "parse_array"]);
    }

    #[test]
    fn traps() {
        let deep = format!("{}{}", "[".repeat(MAX_DEPTH + 1), "]".repeat(MAX_DEPTH + 1));
        match run(deep.as_bytes()).status {
            ExitStatus::Crash(c) => assert_eq!(c.category, "stack-exhaustion"),
            other => panic!("{other:?}"),
        }
        match run(b"\"\\udc00\"").status {
            ExitStatus::Crash(c) => {
                assert_eq!(c.category, "lone-surrogate");
                assert_eq!(c.function, "parse_string");
            }
            other => panic!("{other:?}"),
        }
    }
}
