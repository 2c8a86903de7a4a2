use std::fmt;

use thiserror::Error;

use super::validate::{resolve, RawBlock, RawFunction, RawInst, RawProgram, RawTerm};
use super::{AssertKind, BinOp, CmpOp, Inst, Operand, Program, Reg, Width, Addr};

/// A positioned validation message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("{line}:{col}: expected {expected}, found {found}")]
    Syntax { line: usize, col: usize, expected: String, found: String },
    #[error("invalid program: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
}

impl ParseError {
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        match self {
            ParseError::Syntax { line, col, expected, found } => vec![Diagnostic {
                line: *line,
                col: *col,
                message: format!("expected {expected}, found {found}"),
            }],
            ParseError::Invalid(d) => d.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Pos {
    pub line: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Tok {
    Ident(String),
    Int(u64),
    Sym(char),
    Arrow,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Int(v) => write!(f, "`{v}`"),
            Tok::Sym(c) => write!(f, "`{c}`"),
            Tok::Arrow => write!(f, "`->`"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

pub(crate) fn lex(text: &str) -> Result<Vec<(Tok, Pos)>, ParseError> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, col };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == ';' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            col += i - start;
            out.push((Tok::Ident(s), pos));
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let s: String = chars[start..i].iter().filter(|&&c| c != '_').collect();
            col += i - start;
            let parsed = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
                u64::from_str_radix(hex, 16)
            } else {
                s.parse::<u64>()
            };
            match parsed {
                Ok(v) => out.push((Tok::Int(v), pos)),
                Err(_) => {
                    return Err(ParseError::Syntax {
                        line: pos.line,
                        col: pos.col,
                        expected: "integer literal".into(),
                        found: format!("`{s}`"),
                    })
                }
            }
            continue;
        }
        if c == '-' && chars.get(i + 1) == Some(&'>') {
            out.push((Tok::Arrow, pos));
            i += 2;
            col += 2;
            continue;
        }
        if "(){},:=+-@".contains(c) {
            out.push((Tok::Sym(c), pos));
            i += 1;
            col += 1;
            continue;
        }
        return Err(ParseError::Syntax {
            line,
            col,
            expected: "token".into(),
            found: format!("`{c}`"),
        });
    }
    out.push((Tok::Eof, Pos { line, col }));
    Ok(out)
}

pub(crate) struct Cursor {
    toks: Vec<(Tok, Pos)>,
    at: usize,
}

impl Cursor {
    pub(crate) fn new(toks: Vec<(Tok, Pos)>) -> Self {
        Cursor { toks, at: 0 }
    }

    pub(crate) fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    pub(crate) fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].0
    }

    pub(crate) fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> (Tok, Pos) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    pub(crate) fn error<T>(&self, expected: &str) -> Result<T, ParseError> {
        let pos = self.pos();
        Err(ParseError::Syntax {
            line: pos.line,
            col: pos.col,
            expected: expected.to_string(),
            found: self.peek().to_string(),
        })
    }

    pub(crate) fn eat_sym(&mut self, c: char) -> bool {
        if self.peek() == &Tok::Sym(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    pub(crate) fn expect_sym(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat_sym(c) {
            Ok(())
        } else {
            self.error(&format!("`{c}`"))
        }
    }

    pub(crate) fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    pub(crate) fn expect_keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.is_keyword(kw) {
            self.bump();
            Ok(())
        } else {
            self.error(&format!("`{kw}`"))
        }
    }

    pub(crate) fn ident(&mut self, what: &str) -> Result<(String, Pos), ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                let pos = self.bump().1;
                Ok((s, pos))
            }
            _ => self.error(what),
        }
    }

    /// Signed integer literal, returned as two's complement.
    pub(crate) fn int(&mut self) -> Result<u64, ParseError> {
        let neg = self.eat_sym('-');
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(if neg { v.wrapping_neg() } else { v })
            }
            _ => self.error("integer"),
        }
    }

    fn reg(&mut self) -> Result<Reg, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => match as_reg(&s) {
                Some(r) => {
                    self.bump();
                    Ok(r)
                }
                None => self.error("register"),
            },
            _ => self.error("register"),
        }
    }

    fn operand(&mut self) -> Result<Operand, ParseError> {
        match self.peek() {
            Tok::Int(_) | Tok::Sym('-') => Ok(Operand::Imm(self.int()?)),
            _ => Ok(Operand::Reg(self.reg()?)),
        }
    }

    fn addr(&mut self) -> Result<Addr, ParseError> {
        let base = self.reg()?;
        let offset = if self.eat_sym('+') {
            self.int()? as i64
        } else if self.peek() == &Tok::Sym('-') {
            self.int()? as i64
        } else {
            0
        };
        Ok(Addr { base, offset })
    }

    fn width(&mut self) -> Result<Width, ParseError> {
        let pos = self.pos();
        let v = self.int()?;
        Width::new(v).ok_or(ParseError::Syntax {
            line: pos.line,
            col: pos.col,
            expected: "width 1, 2, 4 or 8".into(),
            found: format!("`{v}`"),
        })
    }

    fn args(&mut self) -> Result<Vec<Operand>, ParseError> {
        self.expect_sym('(')?;
        let mut args = Vec::new();
        if !self.eat_sym(')') {
            loop {
                args.push(self.operand()?);
                if self.eat_sym(')') {
                    break;
                }
                self.expect_sym(',')?;
            }
        }
        Ok(args)
    }

    fn ret_dst(&mut self) -> Result<Option<Reg>, ParseError> {
        if self.peek() == &Tok::Arrow {
            self.bump();
            Ok(Some(self.reg()?))
        } else {
            Ok(None)
        }
    }

    fn name_list(&mut self) -> Result<Vec<String>, ParseError> {
        self.expect_sym('{')?;
        let mut names = vec![self.ident("name")?.0];
        while self.eat_sym(',') {
            names.push(self.ident("name")?.0);
        }
        self.expect_sym('}')?;
        Ok(names)
    }
}

pub(crate) fn as_reg(s: &str) -> Option<Reg> {
    let digits = s.strip_prefix('r')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().map(Reg)
}

fn bin_op(s: &str) -> Option<BinOp> {
    BinOp::ALL.into_iter().find(|op| op.mnemonic() == s)
}

fn cmp_op(s: &str) -> Option<CmpOp> {
    [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le].into_iter().find(|op| op.mnemonic() == s)
}

/// Parses and validates MiniKernel source text.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut cur = Cursor::new(lex(text)?);
    let raw = parse_raw(&mut cur)?;
    resolve(raw).map_err(ParseError::Invalid)
}

fn parse_raw(cur: &mut Cursor) -> Result<RawProgram, ParseError> {
    cur.expect_keyword("program")?;
    let (name, _) = cur.ident("program name")?;
    let mut raw = RawProgram { name, ..RawProgram::default() };
    loop {
        match cur.peek().clone() {
            Tok::Eof => break,
            Tok::Ident(kw) if kw == "global" => {
                cur.bump();
                raw.globals.push(cur.ident("global name")?);
            }
            Tok::Ident(kw) if kw == "entry" => {
                cur.bump();
                raw.entries.push(cur.ident("entry name")?);
            }
            Tok::Ident(kw) if kw == "template" => {
                cur.bump();
                let (n, pos) = cur.ident("template name")?;
                let names = cur.name_list()?;
                raw.templates.push((n, names, pos));
            }
            Tok::Ident(kw) if kw == "module" => {
                cur.bump();
                let (n, pos) = cur.ident("module name")?;
                let names = cur.name_list()?;
                raw.modules.push((n, names, pos));
            }
            Tok::Sym('@') => raw.functions.push(parse_function(cur)?),
            Tok::Ident(kw) if kw == "fn" => raw.functions.push(parse_function(cur)?),
            _ => return cur.error("`global`, `fn`, `entry`, `template` or `module`"),
        }
    }
    Ok(raw)
}

fn parse_function(cur: &mut Cursor) -> Result<RawFunction, ParseError> {
    let mut skip = false;
    if cur.eat_sym('@') {
        cur.expect_keyword("skip")?;
        skip = true;
    }
    cur.expect_keyword("fn")?;
    let (name, pos) = cur.ident("function name")?;
    cur.expect_sym('(')?;
    let mut params = Vec::new();
    if !cur.eat_sym(')') {
        loop {
            params.push(cur.reg()?);
            if cur.eat_sym(')') {
                break;
            }
            cur.expect_sym(',')?;
        }
    }
    cur.expect_sym('{')?;
    let mut blocks = Vec::new();
    while !cur.eat_sym('}') {
        blocks.push(parse_block(cur)?);
    }
    Ok(RawFunction { name, pos, params, skip, blocks })
}

fn parse_block(cur: &mut Cursor) -> Result<RawBlock, ParseError> {
    let pos = cur.pos();
    let label = match (cur.peek().clone(), cur.peek2()) {
        (Tok::Ident(l), Tok::Sym(':')) => l,
        _ => return cur.error("block label"),
    };
    cur.bump();
    cur.bump();
    let mut insts = Vec::new();
    loop {
        let ipos = cur.pos();
        if let (Tok::Ident(_), Tok::Sym(':')) | (Tok::Sym('}'), _) = (cur.peek(), cur.peek2()) {
            return Err(ParseError::Syntax {
                line: ipos.line,
                col: ipos.col,
                expected: format!("terminator (`br`, `condbr` or `ret`) ending block `{label}`"),
                found: cur.peek().to_string(),
            });
        }
        match parse_stmt(cur)? {
            Stmt::Inst(i) => insts.push((i, ipos)),
            Stmt::Term(t) => return Ok(RawBlock { label, pos, insts, term: (t, ipos) }),
        }
    }
}

enum Stmt {
    Inst(RawInst),
    Term(RawTerm),
}

fn parse_stmt(cur: &mut Cursor) -> Result<Stmt, ParseError> {
    let kw = match cur.peek().clone() {
        Tok::Ident(s) => s,
        _ => return cur.error("instruction"),
    };
    if let Some(dst) = as_reg(&kw) {
        cur.bump();
        cur.expect_sym('=')?;
        let (op, op_pos) = cur.ident("opcode")?;
        let inst = match op.as_str() {
            "const" => RawInst::Plain(Inst::Const { dst, value: cur.int()? }),
            "cmp" => {
                let (pred, _) = cur.ident("comparison predicate")?;
                let Some(op) = cmp_op(&pred) else {
                    return cur.error("`eq`, `ne`, `lt` or `le`");
                };
                let lhs = cur.operand()?;
                cur.expect_sym(',')?;
                let rhs = cur.operand()?;
                RawInst::Plain(Inst::Cmp { op, dst, lhs, rhs })
            }
            "load" => {
                let addr = cur.addr()?;
                cur.expect_sym(',')?;
                let width = cur.width()?;
                RawInst::Plain(Inst::Load { dst, addr, width })
            }
            "alloc" => RawInst::Plain(Inst::Alloc { dst, size: cur.operand()? }),
            "gload" => RawInst::GLoad { dst, name: cur.ident("global name")? },
            "fnaddr" => RawInst::FnAddr { dst, name: cur.ident("function name")? },
            other => match bin_op(other) {
                Some(op) => {
                    let lhs = cur.operand()?;
                    cur.expect_sym(',')?;
                    let rhs = cur.operand()?;
                    RawInst::Plain(Inst::Bin { op, dst, lhs, rhs })
                }
                None => return Err(unknown_opcode(op_pos, other)),
            },
        };
        return Ok(Stmt::Inst(inst));
    }
    let kw_pos = cur.bump().1;
    let stmt = match kw.as_str() {
        "store" => {
            let addr = cur.addr()?;
            cur.expect_sym(',')?;
            let value = cur.operand()?;
            cur.expect_sym(',')?;
            let width = cur.width()?;
            Stmt::Inst(RawInst::Plain(Inst::Store { addr, value, width }))
        }
        "free" => Stmt::Inst(RawInst::Plain(Inst::Free { ptr: cur.reg()? })),
        "gstore" => {
            let name = cur.ident("global name")?;
            cur.expect_sym(',')?;
            Stmt::Inst(RawInst::GStore { name, value: cur.operand()? })
        }
        "call" => {
            let name = cur.ident("function name")?;
            let args = cur.args()?;
            let dst = cur.ret_dst()?;
            Stmt::Inst(RawInst::Call { name, args, dst })
        }
        "icall" => {
            let target = cur.reg()?;
            let args = cur.args()?;
            let dst = cur.ret_dst()?;
            Stmt::Inst(RawInst::Plain(Inst::ICall { target, args, dst }))
        }
        "assertfail" => {
            let (k, _) = cur.ident("`WARN` or `BUG`")?;
            let kind = match k.as_str() {
                "WARN" => AssertKind::Warn,
                "BUG" => AssertKind::Bug,
                _ => return cur.error("`WARN` or `BUG`"),
            };
            Stmt::Inst(RawInst::Plain(Inst::AssertFail(kind)))
        }
        "nop" => Stmt::Inst(RawInst::Plain(Inst::Nop)),
        "br" => Stmt::Term(RawTerm::Br(cur.ident("label")?)),
        "condbr" => {
            let cond = cur.reg()?;
            cur.expect_sym(',')?;
            let then_to = cur.ident("label")?;
            cur.expect_sym(',')?;
            let else_to = cur.ident("label")?;
            Stmt::Term(RawTerm::CondBr { cond, then_to, else_to })
        }
        "ret" => Stmt::Term(RawTerm::Ret(cur.operand()?)),
        other => return Err(unknown_opcode(kw_pos, other)),
    };
    Ok(stmt)
}

fn unknown_opcode(pos: Pos, op: &str) -> ParseError {
    ParseError::Syntax {
        line: pos.line,
        col: pos.col,
        expected: "instruction".into(),
        found: format!("`{op}`"),
    }
}
