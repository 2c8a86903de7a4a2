use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::parse::{lex, Cursor, ParseError, Tok};
use super::Program;

/// One syscall invocation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Call {
    pub syscall: String,
    pub args: Vec<u64>,
}

impl Call {
    pub fn new(syscall: impl Into<String>, args: impl Into<Vec<u64>>) -> Self {
        Call { syscall: syscall.into(), args: args.into() }
    }
}

/// A proof-of-concept: an ordered list of syscall invocations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TestCase {
    pub calls: Vec<Call>,
}

impl TestCase {
    pub fn new(calls: Vec<Call>) -> Self {
        TestCase { calls }
    }

    pub fn len(&self) -> usize {
        self.calls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.calls.is_empty()
    }

    /// Checks syscall names and arities against `p`.
    pub fn check(&self, p: &Program) -> Result<(), String> {
        for (i, c) in self.calls.iter().enumerate() {
            let Some(id) = p.entry(&c.syscall) else {
                return Err(format!("call {i}: unknown syscall `{}`", c.syscall));
            };
            let want = p.func(id).params.len();
            if want != c.args.len() {
                return Err(format!(
                    "call {i}: `{}` takes {want} arguments, got {}",
                    c.syscall,
                    c.args.len()
                ));
            }
        }
        Ok(())
    }
}

/// Parses a PoC without consulting a program.
///
/// Accepts either the braced `poc { ... }` form or a bare list of `call` lines.
/// An empty (or comment-only) file is the empty test case.
pub fn parse_testcase_unchecked(text: &str) -> Result<TestCase, ParseError> {
    let mut cur = Cursor::new(lex(text)?);
    if cur.peek() == &Tok::Eof {
        return Ok(TestCase::default());
    }
    let braced = cur.is_keyword("poc");
    if braced {
        cur.expect_keyword("poc")?;
        cur.expect_sym('{')?;
    }
    let mut calls = Vec::new();
    loop {
        if braced && cur.eat_sym('}') {
            break;
        }
        if !braced && cur.peek() == &Tok::Eof {
            break;
        }
        cur.expect_keyword("call")?;
        let (name, _) = cur.ident("syscall name")?;
        cur.expect_sym('(')?;
        let mut args = Vec::new();
        if !cur.eat_sym(')') {
            loop {
                args.push(cur.int()?);
                if cur.eat_sym(')') {
                    break;
                }
                cur.expect_sym(',')?;
            }
        }
        calls.push(Call { syscall: name, args });
    }
    if cur.peek() != &Tok::Eof {
        return cur.error("end of input");
    }
    Ok(TestCase { calls })
}

/// Parses a PoC and checks it against `p`.
pub fn parse_testcase(text: &str, p: &Program) -> Result<TestCase, ParseError> {
    let tc = parse_testcase_unchecked(text)?;
    tc.check(p).map_err(|message| {
        ParseError::Invalid(vec![super::Diagnostic { line: 0, col: 0, message }])
    })?;
    Ok(tc)
}

pub fn print_testcase(tc: &TestCase) -> String {
    let mut out = String::from("poc {\n");
    for c in &tc.calls {
        let args = c.args.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(", ");
        writeln!(out, "  call {}({args})", c.syscall).unwrap();
    }
    out.push_str("}\n");
    out
}
