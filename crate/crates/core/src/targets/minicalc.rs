//! `mini-calc`: a small statement language over 64-bit integers.
//!
//! ```text
//! program := stmt*
//! stmt    := "let" IDENT "=" expr ";"
//!          | "print" expr ";"
//!          | "if" expr "then" stmt* ["else" stmt*] "end" [";"]
//!          | "while" expr "do" stmt* "end" [";"]
//!          | expr ";"
//! expr    := infix over < == + - * / % (loosest to tightest), unary minus,
//!            parentheses, integer literals and variables
//! ```
//!
//! Division by zero traps and is reported as a crash. Every other error
//! rejects the input and ends the run normally.

use std::sync::OnceLock;
use std::time::Duration;

use super::instrument::{br, reject, Recorder, Step, DEFAULT_FUEL};
use super::source_index::{scan, ScannedSource};
use super::{ProgramIndex, TargetAdapter};
use crate::coverage::ExecutionFeedback;
use crate::error::TargetError;

const FILE: &str = "minicalc.rs";
const SOURCE: &str = include_str!("minicalc.rs");
const FUNCTIONS: &[&str] = &[
    "main",
    "run",
    "parse",
    "next_token",
    "parse_stmt",
    "parse_block",
    "parse_expr",
    "parse_primary",
    "eval_stmt",
    "eval_expr",
    "eval_binop",
    "lookup_var",
    "store_var",
];

const MAX_INPUT: usize = 4096;
const MAX_LITERAL: i64 = 1_000_000_000;
const MAX_DEPTH: usize = 32;
const MAX_VARS: usize = 8;
const MAX_OUTPUT: usize = 1024;

pub(crate) fn full_tour() -> Vec<Vec<u8>> {
    let mut tour: Vec<Vec<u8>> = TOUR.iter().map(|s| s.as_bytes().to_vec()).collect();
    tour.push("1;".repeat(MAX_INPUT / 2 + 1).into_bytes());
    tour
}

const TOUR: &[&str] = &[
    "1+2;",
    "let x=1;print x;",
    "if 1 then print 2 end;",
    "if 1 then print 2; end;",
    "if 0 then print 1; else print 2; end",
    "if 0 then print 1; end",
    "let x = 3; while x do print x; let x = x - 1; end;",
    "while 1 do print 1; end",
    "print 42;",
    "print 7/0;",
    "print 7%0;",
    "print 5 % 3; print 6/2; print 1*2+3;",
    "print 1<2; print 2==2;",
    "print 999999999*999999999*999999999;",
    "print -(0-536870912*536870912*16-536870912*536870912*16);",
    "print (1+2;",
    "print -1;",
    "$",
    "12345678901;",
    "print y;",
    "let a=1;let b=1;let c=1;let d=1;let e=1;let f=1;let g=1;let h=1;let i=1;",
    "let a=1; let a=2;",
    "",
    "   ",
    "1 +",
    "((((((((((((((((((((((((((((((((((1))))))))))))))))))))))))))))))))));",
    "if 1 then if 1 then if 1 then if 1 then if 1 then if 1 then if 1 then if 1 then \
     if 1 then if 1 then if 1 then if 1 then if 1 then if 1 then if 1 then if 1 then \
     if 1 then if 1 then if 1 then if 1 then if 1 then if 1 then if 1 then if 1 then \
     if 1 then if 1 then if 1 then if 1 then if 1 then if 1 then if 1 then if 1 then \
     if 1 then if 1 then",
    "do then else end;",
];

fn scanned() -> &'static ScannedSource {
    static SCANNED: OnceLock<ScannedSource> = OnceLock::new();
    SCANNED.get_or_init(|| scan(FILE, SOURCE, FUNCTIONS, "main"))
}

/// Harness options. The default driver never echoes its source, which leaves
/// the echo branch unreachable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CalcDriver {
    pub echo_source: bool,
}

#[derive(Debug, Clone, Default)]
pub struct MiniCalc {
    driver: CalcDriver,
}

impl MiniCalc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_driver(driver: CalcDriver) -> Self {
        MiniCalc { driver }
    }
}

impl TargetAdapter for MiniCalc {
    fn name(&self) -> &str {
        "mini-calc"
    }

    fn execute(&self, input: &[u8], time_limit: Duration) -> Result<ExecutionFeedback, TargetError> {
        if time_limit.is_zero() {
            return Err(TargetError::InvalidTimeLimit);
        }
        let mut calc = Calc {
            rec: Recorder::new(&scanned().table, time_limit, DEFAULT_FUEL),
            src: input,
            pos: 0,
            peeked: None,
            vars: Vec::new(),
            out: Vec::new(),
            depth: 0,
            block_depth: 0,
            driver: self.driver,
        };
        let halt = calc.main().err();
        Ok(calc.rec.finish(halt))
    }

    fn index(&self) -> &ProgramIndex {
        &scanned().index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Lt,
    Eq,
}

fn precedence(op: Op) -> u8 {
    match op {
        Op::Lt | Op::Eq => 1,
        Op::Add | Op::Sub => 2,
        Op::Mul | Op::Div | Op::Mod => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Num(i64),
    Ident(String),
    Let,
    Print,
    If,
    Then,
    Else,
    End,
    While,
    Do,
    Op(Op),
    Assign,
    LParen,
    RParen,
    Semi,
    Eof,
}

impl Tok {
    fn atom(&self) -> Option<Expr> {
        match self {
            Tok::Num(n) => Some(Expr::Num(*n)),
            Tok::Ident(name) => Some(Expr::Var(name.clone())),
            _ => None,
        }
    }
}

#[derive(Debug)]
enum Expr {
    Num(i64),
    Var(String),
    Neg(Box<Expr>),
    Binary(Op, Box<Expr>, Box<Expr>),
}

#[derive(Debug)]
enum Stmt {
    Let(String, Expr),
    Print(Expr),
    If(Expr, Vec<Stmt>, Option<Vec<Stmt>>),
    While(Expr, Vec<Stmt>),
    Expr(Expr),
}

struct Calc<'a> {
    rec: Recorder<'static>,
    src: &'a [u8],
    pos: usize,
    peeked: Option<Tok>,
    vars: Vec<(String, i64)>,
    out: Vec<u8>,
    depth: usize,
    block_depth: usize,
    driver: CalcDriver,
}

impl Calc<'_> {
    fn call<T>(&mut self, name: &'static str, body: impl FnOnce(&mut Self) -> Step<T>) -> Step<T> {
        self.rec.enter(name)?;
        let out = body(self);
        self.rec.exit();
        out
    }

    fn peek(&mut self) -> Step<Tok> {
        if self.peeked.is_none() {
            let tok = self.next_token()?;
            self.peeked = Some(tok);
        }
        Ok(self.peeked.clone().unwrap_or(Tok::Eof))
    }

    fn advance(&mut self) -> Step<Tok> {
        match self.peeked.take() {
            Some(tok) => Ok(tok),
            None => self.next_token(),
        }
    }

    fn expect(&mut self, want: Tok, what: &str) -> Step<()> {
        if self.advance()? == want {
            Ok(())
        } else {
            reject(format!("expected {what}"))
        }
    }

    fn main(&mut self) -> Step<()> {
        self.call("main", |s| {
            if br!(s, s.src.len() > MAX_INPUT) {
                return reject("input too long");
            }
            s.run()
        })
    }

    fn run(&mut self) -> Step<()> {
        self.call("run", |s| {
            if br!(s, s.driver.echo_source) {
                let src = s.src;
                s.out.extend_from_slice(src);
            }
            let program = s.parse()?;
            if br!(s, program.is_empty()) {
                return reject("empty program");
            }
            for stmt in &program {
                s.eval_stmt(stmt)?;
            }
            Ok(())
        })
    }

    fn parse(&mut self) -> Step<Vec<Stmt>> {
        self.call("parse", |s| {
            let mut program = Vec::new();
            while br!(s, s.peek()? != Tok::Eof) {
                program.push(s.parse_stmt()?);
            }
            Ok(program)
        })
    }

    fn next_token(&mut self) -> Step<Tok> {
        self.call("next_token", |s| {
            while br!(s, s.pos < s.src.len() && s.src[s.pos].is_ascii_whitespace()) {
                s.pos += 1;
            }
            if br!(s, s.pos >= s.src.len()) {
                return Ok(Tok::Eof);
            }
            let c = s.src[s.pos];
            if br!(s, c.is_ascii_digit()) {
                let mut value: i64 = 0;
                while s.pos < s.src.len() && s.src[s.pos].is_ascii_digit() {
                    value = value * 10 + i64::from(s.src[s.pos] - b'0');
                    s.pos += 1;
                    if br!(s, value > MAX_LITERAL) {
                        return reject("literal too large");
                    }
                }
                return Ok(Tok::Num(value));
            }
            if br!(s, c.is_ascii_alphabetic() || c == b'_') {
                let start = s.pos;
                while s.pos < s.src.len() && (s.src[s.pos].is_ascii_alphanumeric() || s.src[s.pos] == b'_') {
                    s.pos += 1;
                }
                let word = &s.src[start..s.pos];
                if br!(s, word == b"let") {
                    return Ok(Tok::Let);
                }
                if br!(s, word == b"print") {
                    return Ok(Tok::Print);
                }
                if br!(s, word == b"if") {
                    return Ok(Tok::If);
                }
                if br!(s, word == b"then") {
                    return Ok(Tok::Then);
                }
                if br!(s, word == b"else") {
                    return Ok(Tok::Else);
                }
                if br!(s, word == b"end") {
                    return Ok(Tok::End);
                }
                if br!(s, word == b"while") {
                    return Ok(Tok::While);
                }
                if br!(s, word == b"do") {
                    return Ok(Tok::Do);
                }
                return Ok(Tok::Ident(String::from_utf8_lossy(word).into_owned()));
            }
            s.pos += 1;
            if br!(s, c == b'=') {
                if br!(s, s.src.get(s.pos) == Some(&b'=')) {
                    s.pos += 1;
                    return Ok(Tok::Op(Op::Eq));
                }
                return Ok(Tok::Assign);
            }
            let tok = match c {
                b'+' => Some(Tok::Op(Op::Add)),
                b'-' => Some(Tok::Op(Op::Sub)),
                b'*' => Some(Tok::Op(Op::Mul)),
                b'/' => Some(Tok::Op(Op::Div)),
                b'%' => Some(Tok::Op(Op::Mod)),
                b'<' => Some(Tok::Op(Op::Lt)),
                b'(' => Some(Tok::LParen),
                b')' => Some(Tok::RParen),
                b';' => Some(Tok::Semi),
                _ => None,
            };
            if br!(s, tok.is_none()) {
                return reject(format!("unexpected byte {c:#04x}"));
            }
            Ok(tok.unwrap_or(Tok::Eof))
        })
    }

    fn parse_stmt(&mut self) -> Step<Stmt> {
        self.call("parse_stmt", |s| {
            let tok = s.peek()?;
            if br!(s, tok == Tok::Let) {
                s.advance()?;
                let name = match s.advance()? {
                    Tok::Ident(name) => name,
                    _ => return reject("expected a variable name"),
                };
                s.expect(Tok::Assign, "`=`")?;
                let value = s.parse_expr(0)?;
                s.expect(Tok::Semi, "`;`")?;
                return Ok(Stmt::Let(name, value));
            }
            if br!(s, tok == Tok::Print) {
                s.advance()?;
                let value = s.parse_expr(0)?;
                if br!(s, matches!(s.peek()?, Tok::End | Tok::Else)) {
                    return Ok(Stmt::Print(value));
                }
                s.expect(Tok::Semi, "`;`")?;
                return Ok(Stmt::Print(value));
            }
            if br!(s, tok == Tok::If) {
                s.advance()?;
                let cond = s.parse_expr(0)?;
                s.expect(Tok::Then, "`then`")?;
                let then_body = s.parse_block()?;
                let mut else_body = None;
                if br!(s, s.peek()? == Tok::Else) {
                    s.advance()?;
                    else_body = Some(s.parse_block()?);
                }
                s.expect(Tok::End, "`end`")?;
                if br!(s, s.peek()? == Tok::Semi) {
                    s.advance()?;
                }
                return Ok(Stmt::If(cond, then_body, else_body));
            }
            if br!(s, tok == Tok::While) {
                s.advance()?;
                let cond = s.parse_expr(0)?;
                s.expect(Tok::Do, "`do`")?;
                let body = s.parse_block()?;
                s.expect(Tok::End, "`end`")?;
                if br!(s, s.peek()? == Tok::Semi) {
                    s.advance()?;
                }
                return Ok(Stmt::While(cond, body));
            }
            let expr = s.parse_expr(0)?;
            s.expect(Tok::Semi, "`;`")?;
            Ok(Stmt::Expr(expr))
        })
    }

    fn parse_block(&mut self) -> Step<Vec<Stmt>> {
        self.call("parse_block", |s| {
            s.block_depth += 1;
            if br!(s, s.block_depth > MAX_DEPTH) {
                return reject("blocks nested too deeply");
            }
            let mut body = Vec::new();
            loop {
                let tok = s.peek()?;
                if br!(s, matches!(tok, Tok::End | Tok::Else | Tok::Eof)) {
                    s.block_depth -= 1;
                    return Ok(body);
                }
                body.push(s.parse_stmt()?);
            }
        })
    }

    fn parse_expr(&mut self, min_prec: u8) -> Step<Expr> {
        self.call("parse_expr", |s| {
            let mut lhs = s.parse_primary()?;
            loop {
                let op = match s.peek()? {
                    Tok::Op(op) => Some(op),
                    _ => None,
                };
                if br!(s, op.is_none()) {
                    break;
                }
                let op = op.unwrap_or(Op::Add);
                if br!(s, precedence(op) < min_prec) {
                    break;
                }
                s.advance()?;
                let rhs = s.parse_expr(precedence(op) + 1)?;
                lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
            }
            Ok(lhs)
        })
    }

    fn parse_primary(&mut self) -> Step<Expr> {
        self.call("parse_primary", |s| {
            s.depth += 1;
            if br!(s, s.depth > MAX_DEPTH) {
                return reject("expression nested too deeply");
            }
            let tok = s.advance()?;
            let atom = tok.atom();
            let expr = if br!(s, atom.is_some()) {
                atom.unwrap_or(Expr::Num(0))
            } else if br!(s, tok == Tok::LParen) {
                let inner = s.parse_expr(0)?;
                if br!(s, s.peek()? != Tok::RParen) {
                    return reject("expected `)`");
                }
                s.advance()?;
                inner
            } else if br!(s, tok == Tok::Op(Op::Sub)) {
                Expr::Neg(Box::new(s.parse_primary()?))
            } else {
                return reject("expected an expression");
            };
            s.depth -= 1;
            Ok(expr)
        })
    }

    fn eval_stmt(&mut self, stmt: &Stmt) -> Step<()> {
        self.call("eval_stmt", |s| match stmt {
            Stmt::Let(name, expr) => {
                let value = s.eval_expr(expr)?;
                s.store_var(name, value)
            }
            Stmt::Print(expr) => {
                let value = s.eval_expr(expr)?;
                if br!(s, s.out.len() >= MAX_OUTPUT) {
                    return reject("output limit exceeded");
                }
                if br!(s, value == 42) {
                    s.out.extend_from_slice(b"the answer\n");
                }
                s.out.extend_from_slice(format!("{value}\n").as_bytes());
                Ok(())
            }
            Stmt::If(cond, then_body, else_body) => {
                let value = s.eval_expr(cond)?;
                if br!(s, value != 0) {
                    for inner in then_body {
                        s.eval_stmt(inner)?;
                    }
                } else if br!(s, else_body.is_some()) {
                    for inner in else_body.iter().flatten() {
                        s.eval_stmt(inner)?;
                    }
                }
                Ok(())
            }
            Stmt::While(cond, body) => {
                loop {
                    s.rec.tick()?;
                    let value = s.eval_expr(cond)?;
                    if br!(s, value == 0) {
                        break;
                    }
                    for inner in body {
                        s.eval_stmt(inner)?;
                    }
                }
                Ok(())
            }
            Stmt::Expr(expr) => s.eval_expr(expr).map(|_| ()),
        })
    }

    fn eval_expr(&mut self, expr: &Expr) -> Step<i64> {
        self.call("eval_expr", |s| match expr {
            Expr::Num(n) => Ok(*n),
            Expr::Var(name) => s.lookup_var(name),
            Expr::Neg(inner) => {
                let value = s.eval_expr(inner)?.checked_neg();
                if br!(s, value.is_none()) {
                    return reject("negation overflow");
                }
                Ok(value.unwrap_or_default())
            }
            Expr::Binary(op, lhs, rhs) => {
                let a = s.eval_expr(lhs)?;
                let b = s.eval_expr(rhs)?;
                s.eval_binop(*op, a, b)
            }
        })
    }

    fn eval_binop(&mut self, op: Op, lhs: i64, rhs: i64) -> Step<i64> {
        self.call("eval_binop", |s| {
            if br!(s, op == Op::Div || op == Op::Mod)
                && br!(s, rhs == 0) {
                    if br!(s, op == Op::Div) {
                        return Err(s.rec.trap("division-by-zero"));
                    }
                    return Ok(0);
                }
            if br!(s, op == Op::Lt || op == Op::Eq) {
                let holds = if op == Op::Lt { lhs < rhs } else { lhs == rhs };
                return Ok(i64::from(holds));
            }
            let result = match op {
                Op::Add => lhs.checked_add(rhs),
                Op::Sub => lhs.checked_sub(rhs),
                Op::Mul => lhs.checked_mul(rhs),
                Op::Div => lhs.checked_div(rhs),
                Op::Mod => lhs.checked_rem(rhs),
                Op::Lt | Op::Eq => None,
            };
            if br!(s, result.is_none()) {
                return reject("arithmetic overflow");
            }
            Ok(result.unwrap_or_default())
        })
    }

    fn lookup_var(&mut self, name: &str) -> Step<i64> {
        self.call("lookup_var", |s| {
            let slot = s.vars.iter().position(|(n, _)| n == name);
            if br!(s, slot.is_none()) {
                return reject(format!("unbound variable `{name}`"));
            }
            Ok(slot.map(|i| s.vars[i].1).unwrap_or_default())
        })
    }

    fn store_var(&mut self, name: &str, value: i64) -> Step<()> {
        self.call("store_var", |s| {
            let slot = s.vars.iter().position(|(n, _)| n == name);
            if br!(s, slot.is_some()) {
                if let Some(i) = slot {
                    s.vars[i].1 = value;
                }
                return Ok(());
            }
            if br!(s, s.vars.len() >= MAX_VARS) {
                return reject("too many variables");
            }
            s.vars.push((name.to_string(), value));
            Ok(())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::ExitStatus;

    const LIMIT: Duration = Duration::from_secs(1);

    fn run(input: &str) -> ExecutionFeedback {
        MiniCalc::new().execute(input.as_bytes(), LIMIT).unwrap()
    }

    #[test]
    fn simple_sum_runs_ok() {
        let fb = run("1+2;");
        assert_eq!(fb.status, ExitStatus::Ok);
        assert_eq!(&fb.trace[..3], ["main", "run", "parse"]);
        assert!(fb.trace.contains(&"eval_binop".to_string()));
    }

    #[test]
    fn division_by_zero_crashes_with_stable_hash() {
        let a = run("1/0;");
        let b = run("print 5/0;");
        let (ExitStatus::Crash(ca), ExitStatus::Crash(cb)) = (&a.status, &b.status) else {
            panic!("expected crashes: {:?} {:?}", a.status, b.status);
        };
        assert_eq!(ca.category, "division-by-zero");
        assert_eq!(ca.function, "eval_binop");
        assert_eq!(ca.dedup_hash, cb.dedup_hash);
        assert_eq!(run("1/0;").status, a.status);
    }

    #[test]
    fn busy_loop_times_out() {
        let fb = MiniCalc::new()
            .execute(b"while 1 do end", Duration::from_millis(1))
            .unwrap();
        assert_eq!(fb.status, ExitStatus::Timeout);
        // Fuel bounds the loop even with a generous clock.
        assert_eq!(run("while 1 do end").status, ExitStatus::Timeout);
    }

    #[test]
    fn syntax_errors_are_not_crashes() {
        for input in ["print (1;", "let = 3;", "@", "if 1 then"] {
            assert_eq!(run(input).status, ExitStatus::Ok, "{input}");
        }
    }

    #[test]
    fn recursion_shows_up_once_in_trace_but_twice_on_stack() {
        let fb = run("print (1+(2*3));");
        let mut names = fb.trace.clone();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), fb.trace.len());
        let deep = fb
            .uncovered
            .iter()
            .find(|ub| ub.call_stack.iter().filter(|f| *f == "parse_expr").count() >= 2);
        assert!(deep.is_some());
    }
}
