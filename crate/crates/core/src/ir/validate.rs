//! Name resolution and structural validation.

use std::collections::{HashMap, HashSet};

use super::parse::{Diagnostic, Pos};
use super::{
    Block, FuncId, Function, GlobalId, Inst, Operand, Program, Reg, Terminator, MAX_SYSCALL_ARITY,
};

#[derive(Debug, Default)]
pub(crate) struct RawProgram {
    pub name: String,
    pub globals: Vec<(String, Pos)>,
    pub functions: Vec<RawFunction>,
    pub entries: Vec<(String, Pos)>,
    pub templates: Vec<(String, Vec<String>, Pos)>,
    pub modules: Vec<(String, Vec<String>, Pos)>,
}

#[derive(Debug)]
pub(crate) struct RawFunction {
    pub name: String,
    pub pos: Pos,
    pub params: Vec<Reg>,
    pub skip: bool,
    pub blocks: Vec<RawBlock>,
}

#[derive(Debug)]
pub(crate) struct RawBlock {
    pub label: String,
    pub pos: Pos,
    pub insts: Vec<(RawInst, Pos)>,
    pub term: (RawTerm, Pos),
}

#[derive(Debug)]
pub(crate) enum RawInst {
    Plain(Inst),
    GLoad { dst: Reg, name: (String, Pos) },
    GStore { name: (String, Pos), value: Operand },
    FnAddr { dst: Reg, name: (String, Pos) },
    Call { name: (String, Pos), args: Vec<Operand>, dst: Option<Reg> },
}

#[derive(Debug)]
pub(crate) enum RawTerm {
    Br((String, Pos)),
    CondBr { cond: Reg, then_to: (String, Pos), else_to: (String, Pos) },
    Ret(Operand),
}

struct Diags(Vec<Diagnostic>);

impl Diags {
    fn push(&mut self, pos: Pos, message: String) {
        self.0.push(Diagnostic { line: pos.line, col: pos.col, message });
    }
}

pub(crate) fn resolve(raw: RawProgram) -> Result<Program, Vec<Diagnostic>> {
    let mut d = Diags(Vec::new());

    let mut globals = Vec::new();
    for (g, pos) in &raw.globals {
        if globals.contains(g) {
            d.push(*pos, format!("duplicate global `{g}`"));
        }
        globals.push(g.clone());
    }
    let global_ids: HashMap<&str, GlobalId> =
        globals.iter().enumerate().map(|(i, g)| (g.as_str(), GlobalId(i as u32))).collect();

    let mut func_ids: HashMap<&str, FuncId> = HashMap::new();
    for (i, f) in raw.functions.iter().enumerate() {
        if func_ids.insert(f.name.as_str(), FuncId(i as u32)).is_some() {
            d.push(f.pos, format!("duplicate function `{}`", f.name));
        }
    }
    let arity: Vec<usize> = raw.functions.iter().map(|f| f.params.len()).collect();

    let mut functions = Vec::new();
    for f in &raw.functions {
        functions.push(resolve_function(f, &func_ids, &global_ids, &arity, &mut d));
    }

    let mut entries = Vec::new();
    for (e, pos) in &raw.entries {
        match func_ids.get(e.as_str()) {
            Some(&id) => {
                if entries.contains(&id) {
                    d.push(*pos, format!("duplicate entry `{e}`"));
                } else if arity[id.0 as usize] > MAX_SYSCALL_ARITY {
                    d.push(*pos, format!("entry `{e}` takes more than {MAX_SYSCALL_ARITY} arguments"));
                } else {
                    entries.push(id);
                }
            }
            None => d.push(*pos, format!("entry `{e}` names no function")),
        }
    }
    let entry_names: HashSet<&str> = entries.iter().map(|id| raw.functions[id.0 as usize].name.as_str()).collect();

    let mut templates = Vec::new();
    for (name, calls, pos) in &raw.templates {
        for c in calls {
            if !entry_names.contains(c.as_str()) {
                d.push(*pos, format!("template `{name}` names unknown syscall `{c}`"));
            }
        }
        if templates.iter().any(|(n, _): &(String, Vec<String>)| n == name) {
            d.push(*pos, format!("duplicate template `{name}`"));
        }
        templates.push((name.clone(), calls.clone()));
    }
    let mut modules = Vec::new();
    for (name, temps, pos) in &raw.modules {
        for t in temps {
            if !templates.iter().any(|(n, _)| n == t) {
                d.push(*pos, format!("module `{name}` names unknown template `{t}`"));
            }
        }
        modules.push((name.clone(), temps.clone()));
    }

    if !d.0.is_empty() {
        return Err(d.0);
    }
    let program = Program::from_parts(raw.name, globals, functions, entries, templates, modules);
    let mut d = Diags(Vec::new());
    for (f, rf) in program.functions.iter().zip(&raw.functions) {
        check_definitions(f, rf, &mut d);
    }
    if d.0.is_empty() {
        Ok(program)
    } else {
        Err(d.0)
    }
}

fn resolve_function(
    f: &RawFunction,
    func_ids: &HashMap<&str, FuncId>,
    global_ids: &HashMap<&str, GlobalId>,
    arity: &[usize],
    d: &mut Diags,
) -> Function {
    if f.blocks.is_empty() {
        d.push(f.pos, format!("function `{}` has no blocks", f.name));
    }
    let mut seen = HashSet::new();
    for p in &f.params {
        if !seen.insert(*p) {
            d.push(f.pos, format!("function `{}` repeats parameter {p}", f.name));
        }
    }
    let mut labels: HashMap<&str, usize> = HashMap::new();
    for (i, b) in f.blocks.iter().enumerate() {
        if labels.insert(b.label.as_str(), i).is_some() {
            d.push(b.pos, format!("duplicate label `{}` in `{}`", b.label, f.name));
        }
    }
    let label = |(l, pos): &(String, Pos), d: &mut Diags| -> usize {
        labels.get(l.as_str()).copied().unwrap_or_else(|| {
            d.push(*pos, format!("unresolved label `{l}` in `{}`", f.name));
            0
        })
    };
    let func = |(n, pos): &(String, Pos), d: &mut Diags| -> FuncId {
        func_ids.get(n.as_str()).copied().unwrap_or_else(|| {
            d.push(*pos, format!("unresolved function `{n}`"));
            FuncId(0)
        })
    };
    let global = |(n, pos): &(String, Pos), d: &mut Diags| -> GlobalId {
        global_ids.get(n.as_str()).copied().unwrap_or_else(|| {
            d.push(*pos, format!("unresolved global `{n}`"));
            GlobalId(0)
        })
    };

    let mut max_reg = f.params.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let mut blocks = Vec::new();
    for b in &f.blocks {
        let mut insts = Vec::new();
        for (ri, pos) in &b.insts {
            let inst = match ri {
                RawInst::Plain(i) => i.clone(),
                RawInst::GLoad { dst, name } => Inst::GLoad { dst: *dst, global: global(name, d) },
                RawInst::GStore { name, value } => Inst::GStore { global: global(name, d), value: *value },
                RawInst::FnAddr { dst, name } => Inst::FnAddr { dst: *dst, func: func(name, d) },
                RawInst::Call { name, args, dst } => {
                    let id = func(name, d);
                    if let Some(&id) = func_ids.get(name.0.as_str()) {
                        let want = arity[id.0 as usize];
                        if want != args.len() {
                            d.push(*pos, format!("call to `{}` passes {} arguments, expected {want}", name.0, args.len()));
                        }
                    }
                    Inst::Call { func: id, args: args.clone(), dst: *dst }
                }
            };
            for r in inst.uses().into_iter().chain(inst.def()) {
                max_reg = max_reg.max(r.0 + 1);
            }
            insts.push(inst);
        }
        let term = match &b.term.0 {
            RawTerm::Br(l) => Terminator::Br(label(l, d)),
            RawTerm::CondBr { cond, then_to, else_to } => {
                max_reg = max_reg.max(cond.0 + 1);
                Terminator::CondBr { cond: *cond, then_to: label(then_to, d), else_to: label(else_to, d) }
            }
            RawTerm::Ret(v) => {
                if let Operand::Reg(r) = v {
                    max_reg = max_reg.max(r.0 + 1);
                }
                Terminator::Ret(*v)
            }
        };
        blocks.push(Block { label: b.label.clone(), insts, term });
    }
    Function { name: f.name.clone(), params: f.params.clone(), blocks, skip: f.skip, num_regs: max_reg }
}

fn term_uses(t: &Terminator) -> Vec<Reg> {
    match t {
        Terminator::CondBr { cond, .. } => vec![*cond],
        Terminator::Ret(Operand::Reg(r)) => vec![*r],
        _ => vec![],
    }
}

/// Must-defined dataflow: a use is valid only if every path from entry defines the register.
fn check_definitions(f: &Function, raw: &RawFunction, d: &mut Diags) {
    let n = f.blocks.len();
    if n == 0 {
        return;
    }
    let universe: HashSet<Reg> = (0..f.num_regs).map(Reg).collect();
    let mut preds = vec![Vec::new(); n];
    for (i, b) in f.blocks.iter().enumerate() {
        for s in b.term.successors() {
            preds[s].push(i);
        }
    }
    let mut out: Vec<HashSet<Reg>> = vec![universe.clone(); n];
    let params: HashSet<Reg> = f.params.iter().copied().collect();
    let input = |i: usize, out: &Vec<HashSet<Reg>>| -> HashSet<Reg> {
        if i == 0 {
            return params.clone();
        }
        let mut it = preds[i].iter();
        match it.next() {
            None => universe.clone(),
            Some(&first) => {
                let mut acc = out[first].clone();
                for &p in it {
                    acc.retain(|r| out[p].contains(r));
                }
                acc
            }
        }
    };
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..n {
            let mut set = input(i, &out);
            set.extend(f.blocks[i].insts.iter().filter_map(Inst::def));
            if set != out[i] {
                out[i] = set;
                changed = true;
            }
        }
    }
    for (i, b) in f.blocks.iter().enumerate() {
        let mut defined = input(i, &out);
        let rb = &raw.blocks[i];
        for (j, inst) in b.insts.iter().enumerate() {
            for r in inst.uses() {
                if !defined.contains(&r) {
                    d.push(rb.insts[j].1, format!("register {r} used before definition in `{}`", f.name));
                }
            }
            if let Some(r) = inst.def() {
                defined.insert(r);
            }
        }
        for r in term_uses(&b.term) {
            if !defined.contains(&r) {
                d.push(rb.term.1, format!("register {r} used before definition in `{}`", f.name));
            }
        }
    }
}
