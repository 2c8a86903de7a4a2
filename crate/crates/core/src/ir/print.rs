use std::fmt::Write;

use super::{Inst, Operand, Program, Terminator};

fn imm(v: u64) -> String {
    let s = v as i64;
    if (-65536..0).contains(&s) {
        s.to_string()
    } else if v > 0xffff {
        format!("{v:#x}")
    } else {
        v.to_string()
    }
}

fn operand(o: &Operand) -> String {
    match o {
        Operand::Reg(r) => r.to_string(),
        Operand::Imm(v) => imm(*v),
    }
}

fn args(a: &[Operand]) -> String {
    a.iter().map(operand).collect::<Vec<_>>().join(", ")
}

fn addr(base: &super::Reg, offset: i64) -> String {
    match offset {
        0 => base.to_string(),
        o if o < 0 => format!("{base}-{}", o.unsigned_abs()),
        o => format!("{base}+{o}"),
    }
}

/// Canonical text form: globals, functions in declaration order, entries,
/// templates, modules; one instruction per line, two-space indentation.
pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    writeln!(out, "program {}", p.name).unwrap();
    for g in &p.globals {
        writeln!(out, "global {g}").unwrap();
    }
    for f in &p.functions {
        out.push('\n');
        let params = f.params.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(", ");
        let skip = if f.skip { "@skip " } else { "" };
        writeln!(out, "{skip}fn {}({params}) {{", f.name).unwrap();
        for b in &f.blocks {
            writeln!(out, "{}:", b.label).unwrap();
            for i in &b.insts {
                writeln!(out, "  {}", inst(p, i)).unwrap();
            }
            let t = match b.term {
                Terminator::Br(t) => format!("br {}", f.blocks[t].label),
                Terminator::CondBr { cond, then_to, else_to } => {
                    format!("condbr {cond}, {}, {}", f.blocks[then_to].label, f.blocks[else_to].label)
                }
                Terminator::Ret(v) => format!("ret {}", operand(&v)),
            };
            writeln!(out, "  {t}").unwrap();
        }
        writeln!(out, "}}").unwrap();
    }
    if !p.entries.is_empty() || !p.templates.is_empty() || !p.modules.is_empty() {
        out.push('\n');
    }
    for e in p.entry_names() {
        writeln!(out, "entry {e}").unwrap();
    }
    for (name, calls) in &p.templates {
        writeln!(out, "template {name} {{ {} }}", calls.join(", ")).unwrap();
    }
    for (name, temps) in &p.modules {
        writeln!(out, "module {name} {{ {} }}", temps.join(", ")).unwrap();
    }
    out
}

fn inst(p: &Program, i: &Inst) -> String {
    match i {
        Inst::Const { dst, value } => format!("{dst} = const {}", imm(*value)),
        Inst::Bin { op, dst, lhs, rhs } => {
            format!("{dst} = {} {}, {}", op.mnemonic(), operand(lhs), operand(rhs))
        }
        Inst::Cmp { op, dst, lhs, rhs } => {
            format!("{dst} = cmp {} {}, {}", op.mnemonic(), operand(lhs), operand(rhs))
        }
        Inst::Load { dst, addr: a, width } => format!("{dst} = load {}, {}", addr(&a.base, a.offset), width.bytes()),
        Inst::Store { addr: a, value, width } => {
            format!("store {}, {}, {}", addr(&a.base, a.offset), operand(value), width.bytes())
        }
        Inst::Alloc { dst, size } => format!("{dst} = alloc {}", operand(size)),
        Inst::Free { ptr } => format!("free {ptr}"),
        Inst::GLoad { dst, global } => format!("{dst} = gload {}", p.globals[global.0 as usize]),
        Inst::GStore { global, value } => format!("gstore {}, {}", p.globals[global.0 as usize], operand(value)),
        Inst::FnAddr { dst, func } => format!("{dst} = fnaddr {}", p.func(*func).name),
        Inst::Call { func, args: a, dst } => {
            let ret = dst.map(|r| format!(" -> {r}")).unwrap_or_default();
            format!("call {}({}){ret}", p.func(*func).name, args(a))
        }
        Inst::ICall { target, args: a, dst } => {
            let ret = dst.map(|r| format!(" -> {r}")).unwrap_or_default();
            format!("icall {target}({}){ret}", args(a))
        }
        Inst::AssertFail(k) => format!("assertfail {}", match k {
            super::AssertKind::Warn => "WARN",
            super::AssertKind::Bug => "BUG",
        }),
        Inst::Nop => "nop".to_string(),
    }
}
