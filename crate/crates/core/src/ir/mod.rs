//! The MiniKernel intermediate representation.
//!
//! A [`Program`] is a set of functions made of basic blocks over unbounded
//! per-function virtual registers. Some functions are exported as syscall
//! entry points; entry points are grouped into templates, and templates into
//! modules, which bound the mutation space of the fuzzer.
//!
//! The text format is line oriented with `;` comments. See [`parse_program`]
//! and [`print_program`].

mod diff;
mod parse;
mod print;
mod testcase;
mod validate;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use diff::{apply_diff, parse_diff, Conflict, Diff, DiffError, Hunk, HunkLine};
pub use parse::{parse_program, Diagnostic, ParseError};
pub use print::print_program;
pub use testcase::{parse_testcase, parse_testcase_unchecked, print_testcase, Call, TestCase};

/// Guest address of function `index` in declaration order.
pub const FUNCTION_TABLE_BASE: u64 = 0x40_0000;
/// Spacing between consecutive function-table addresses.
pub const FUNCTION_TABLE_STRIDE: u64 = 0x100;
/// Maximum arity of a syscall entry point.
pub const MAX_SYSCALL_ARITY: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(pub u32);

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FuncId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GlobalId(pub u32);

/// A register or a 64-bit immediate (negative literals are stored two's complement).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Imm(u64),
}

impl Operand {
    pub fn reg(self) -> Option<Reg> {
        match self {
            Operand::Reg(r) => Some(r),
            Operand::Imm(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl BinOp {
    pub const ALL: [BinOp; 8] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Shr,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
        }
    }

    /// Concrete 64-bit semantics. Shifts by 64 or more yield zero.
    pub fn eval(self, a: u64, b: u64) -> u64 {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => {
                if b >= 64 {
                    0
                } else {
                    a << b
                }
            }
            BinOp::Shr => {
                if b >= 64 {
                    0
                } else {
                    a >> b
                }
            }
        }
    }
}

/// Comparisons are unsigned; the result is 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
}

impl CmpOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            CmpOp::Eq => "eq",
            CmpOp::Ne => "ne",
            CmpOp::Lt => "lt",
            CmpOp::Le => "le",
        }
    }

    pub fn eval(self, a: u64, b: u64) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
        }
    }
}

/// Memory access width in bytes: 1, 2, 4 or 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Width(u8);

impl Width {
    pub const W1: Width = Width(1);
    pub const W2: Width = Width(2);
    pub const W4: Width = Width(4);
    pub const W8: Width = Width(8);

    pub fn new(bytes: u64) -> Option<Width> {
        match bytes {
            1 | 2 | 4 | 8 => Some(Width(bytes as u8)),
            _ => None,
        }
    }

    pub fn bytes(self) -> u64 {
        self.0 as u64
    }

    pub fn mask(self) -> u64 {
        if self.0 == 8 {
            u64::MAX
        } else {
            (1u64 << (8 * self.0 as u32)) - 1
        }
    }
}

/// `base + offset` address operand of loads and stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Addr {
    pub base: Reg,
    pub offset: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AssertKind {
    Warn,
    Bug,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inst {
    Const { dst: Reg, value: u64 },
    Bin { op: BinOp, dst: Reg, lhs: Operand, rhs: Operand },
    Cmp { op: CmpOp, dst: Reg, lhs: Operand, rhs: Operand },
    Load { dst: Reg, addr: Addr, width: Width },
    Store { addr: Addr, value: Operand, width: Width },
    Alloc { dst: Reg, size: Operand },
    Free { ptr: Reg },
    GLoad { dst: Reg, global: GlobalId },
    GStore { global: GlobalId, value: Operand },
    FnAddr { dst: Reg, func: FuncId },
    Call { func: FuncId, args: Vec<Operand>, dst: Option<Reg> },
    ICall { target: Reg, args: Vec<Operand>, dst: Option<Reg> },
    AssertFail(AssertKind),
    Nop,
}

impl Inst {
    /// Register written by this instruction, if any.
    pub fn def(&self) -> Option<Reg> {
        match self {
            Inst::Const { dst, .. }
            | Inst::Bin { dst, .. }
            | Inst::Cmp { dst, .. }
            | Inst::Load { dst, .. }
            | Inst::Alloc { dst, .. }
            | Inst::GLoad { dst, .. }
            | Inst::FnAddr { dst, .. } => Some(*dst),
            Inst::Call { dst, .. } | Inst::ICall { dst, .. } => *dst,
            _ => None,
        }
    }

    /// Registers read by this instruction.
    pub fn uses(&self) -> Vec<Reg> {
        fn op(o: &Operand, out: &mut Vec<Reg>) {
            if let Operand::Reg(r) = o {
                out.push(*r);
            }
        }
        let mut out = Vec::new();
        match self {
            Inst::Bin { lhs, rhs, .. } | Inst::Cmp { lhs, rhs, .. } => {
                op(lhs, &mut out);
                op(rhs, &mut out);
            }
            Inst::Load { addr, .. } => out.push(addr.base),
            Inst::Store { addr, value, .. } => {
                out.push(addr.base);
                op(value, &mut out);
            }
            Inst::Alloc { size, .. } => op(size, &mut out),
            Inst::Free { ptr } => out.push(*ptr),
            Inst::GStore { value, .. } => op(value, &mut out),
            Inst::Call { args, .. } => args.iter().for_each(|a| op(a, &mut out)),
            Inst::ICall { target, args, .. } => {
                out.push(*target);
                args.iter().for_each(|a| op(a, &mut out));
            }
            Inst::Const { .. }
            | Inst::GLoad { .. }
            | Inst::FnAddr { .. }
            | Inst::AssertFail(_)
            | Inst::Nop => {}
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminator {
    Br(usize),
    CondBr { cond: Reg, then_to: usize, else_to: usize },
    Ret(Operand),
}

impl Terminator {
    pub fn successors(&self) -> Vec<usize> {
        match *self {
            Terminator::Br(t) => vec![t],
            Terminator::CondBr { then_to, else_to, .. } => vec![then_to, else_to],
            Terminator::Ret(_) => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub insts: Vec<Inst>,
    pub term: Terminator,
}

impl Block {
    /// Index used by [`Location`] for the terminator.
    pub fn term_index(&self) -> usize {
        self.insts.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<Reg>,
    pub blocks: Vec<Block>,
    /// `@skip` functions are not executed symbolically; calls return a fresh symbol.
    pub skip: bool,
    /// One past the highest register number used.
    pub num_regs: u32,
}

impl Function {
    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.insts.len() + 1).sum()
    }
}

/// Instruction position: `(function, block index, instruction index)`.
/// The terminator of a block sits at index `insts.len()`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Location {
    pub function: String,
    pub block: usize,
    pub index: usize,
}

impl Location {
    pub fn new(function: impl Into<String>, block: usize, index: usize) -> Self {
        Location { function: function.into(), block, index }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.function, self.block, self.index)
    }
}

/// What sits at a [`Location`].
#[derive(Debug, Clone, Copy)]
pub enum Site<'a> {
    Inst(&'a Inst),
    Term(&'a Terminator),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub name: String,
    pub globals: Vec<String>,
    pub functions: Vec<Function>,
    /// Syscall entry points, in declaration order.
    pub entries: Vec<FuncId>,
    pub templates: Vec<(String, Vec<String>)>,
    pub modules: Vec<(String, Vec<String>)>,
    func_index: HashMap<String, FuncId>,
}

impl Program {
    pub(crate) fn from_parts(
        name: String,
        globals: Vec<String>,
        functions: Vec<Function>,
        entries: Vec<FuncId>,
        templates: Vec<(String, Vec<String>)>,
        modules: Vec<(String, Vec<String>)>,
    ) -> Program {
        let func_index = functions
            .iter()
            .enumerate()
            .map(|(i, f)| (f.name.clone(), FuncId(i as u32)))
            .collect();
        Program { name, globals, functions, entries, templates, modules, func_index }
    }

    pub fn func(&self, id: FuncId) -> &Function {
        &self.functions[id.0 as usize]
    }

    pub fn func_id(&self, name: &str) -> Option<FuncId> {
        self.func_index.get(name).copied()
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.func_id(name).map(|id| self.func(id))
    }

    pub fn global_id(&self, name: &str) -> Option<GlobalId> {
        self.globals.iter().position(|g| g == name).map(|i| GlobalId(i as u32))
    }

    pub fn entry(&self, name: &str) -> Option<FuncId> {
        self.entries.iter().copied().find(|&id| self.func(id).name == name)
    }

    pub fn entry_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|&id| self.func(id).name.as_str())
    }

    pub fn function_address(&self, id: FuncId) -> u64 {
        FUNCTION_TABLE_BASE + FUNCTION_TABLE_STRIDE * id.0 as u64
    }

    /// Inverse of [`Program::function_address`].
    pub fn function_at(&self, addr: u64) -> Option<FuncId> {
        let rel = addr.checked_sub(FUNCTION_TABLE_BASE)?;
        if rel % FUNCTION_TABLE_STRIDE != 0 {
            return None;
        }
        let idx = rel / FUNCTION_TABLE_STRIDE;
        (idx < self.functions.len() as u64).then_some(FuncId(idx as u32))
    }

    pub fn site(&self, loc: &Location) -> Option<Site<'_>> {
        let f = self.function(&loc.function)?;
        let b = f.blocks.get(loc.block)?;
        if loc.index < b.insts.len() {
            Some(Site::Inst(&b.insts[loc.index]))
        } else if loc.index == b.insts.len() {
            Some(Site::Term(&b.term))
        } else {
            None
        }
    }

    pub fn instruction_count(&self) -> usize {
        self.functions.iter().map(Function::instruction_count).sum()
    }

    /// Templates containing `syscall`.
    pub fn templates_of<'a>(&'a self, syscall: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.templates
            .iter()
            .filter(move |(_, calls)| calls.iter().any(|c| c == syscall))
            .map(|(name, _)| name.as_str())
    }

    pub fn template(&self, name: &str) -> Option<&[String]> {
        self.templates.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

#[cfg(test)]
mod tests;
