//! Taint dataflow.
//!
//! Registers are tracked flow-sensitively per analysis unit (a function in a
//! call-string context). Memory and globals are flow-insensitive. A memory
//! cell is keyed by the byte offset of the access relative to the base
//! pointer's must-root (a parameter or the instruction that produced it);
//! accesses whose root-relative offset is unknown use a catch-all cell.

use std::collections::{BTreeMap, BTreeSet};

use crate::ir::{BinOp, FuncId, Function, Inst, Location, Operand, Program, Reg, Terminator};

use super::{PotentialKind, TaintLimits, VulnAnchor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub(super) enum Root {
    Param(u32, u32),
    Def(u32, u32, u32),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Cell {
    taint: bool,
    obj: bool,
}

impl Cell {
    fn join(&mut self, o: Cell) -> bool {
        let n = Cell { taint: self.taint | o.taint, obj: self.obj | o.obj };
        let changed = n != *self;
        *self = n;
        changed
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Val {
    cell: Cell,
    root: Option<(Root, i64)>,
}

impl Val {
    fn join(&mut self, o: &Val) {
        self.cell.join(o.cell);
        if self.root != o.root {
            self.root = None;
        }
    }
}

type Regs = Vec<Val>;

fn join_regs(a: &mut Regs, b: &Regs) -> bool {
    let before = a.clone();
    for (x, y) in a.iter_mut().zip(b) {
        x.join(y);
    }
    *a != before
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct UnitKey {
    func: FuncId,
    ctx: Vec<Location>,
    /// Position on the report's call trace for units that resume mid-function.
    level: Option<usize>,
}

struct Unit {
    key: UnitKey,
    args: Vec<Cell>,
    ret: Cell,
}

pub(super) struct Found {
    pub sinks: BTreeSet<(PotentialKind, Location)>,
    pub incomplete: bool,
}

struct Analysis<'a> {
    p: &'a Program,
    a: &'a VulnAnchor,
    limits: &'a TaintLimits,
    units: Vec<Unit>,
    index: BTreeMap<UnitKey, usize>,
    mem: BTreeMap<i64, Cell>,
    mem_any: Cell,
    globals: Vec<Cell>,
    obj_roots: BTreeSet<Root>,
    address_taken: Vec<FuncId>,
    sinks: BTreeSet<(PotentialKind, Location)>,
    changed: bool,
    steps: u64,
    incomplete: bool,
}

enum Entry {
    Start(Regs),
    Resume(Resume),
}

/// Start of a unit that resumes in the middle of a function.
struct Resume {
    block: usize,
    index: usize,
    regs: Regs,
    /// Register receiving the value produced at the resume point.
    dst: Option<(Reg, Cell)>,
}

pub(super) fn analyze(p: &Program, a: &VulnAnchor, limits: &TaintLimits) -> Found {
    let mut address_taken: Vec<FuncId> = p
        .functions
        .iter()
        .flat_map(|f| f.blocks.iter().flat_map(|b| b.insts.iter()))
        .filter_map(|i| match i {
            Inst::FnAddr { func, .. } => Some(*func),
            _ => None,
        })
        .collect();
    address_taken.sort();
    address_taken.dedup();
    let mut an = Analysis {
        p,
        a,
        limits,
        units: Vec::new(),
        index: BTreeMap::new(),
        mem: BTreeMap::new(),
        mem_any: Cell::default(),
        globals: vec![Cell::default(); p.globals.len()],
        obj_roots: BTreeSet::new(),
        address_taken,
        sinks: BTreeSet::new(),
        changed: false,
        steps: 0,
        incomplete: false,
    };
    an.seed_object_roots();
    for level in 0..a.call_trace.len() {
        let f = p.func_id(&a.call_trace[level].function).expect("call trace names a known function");
        an.unit(UnitKey { func: f, ctx: an.trace_ctx(level), level: Some(level) });
    }
    loop {
        an.changed = false;
        let mut i = 0;
        while i < an.units.len() {
            an.run_unit(i);
            i += 1;
            if an.incomplete {
                return Found { sinks: an.sinks, incomplete: true };
            }
        }
        if !an.changed {
            break;
        }
    }
    Found { sinks: an.sinks, incomplete: false }
}

fn truncate(mut v: Vec<Location>, n: usize) -> Vec<Location> {
    v.truncate(n);
    v
}

impl<'a> Analysis<'a> {
    fn trace_ctx(&self, level: usize) -> Vec<Location> {
        truncate(self.a.call_trace[level + 1..].to_vec(), self.limits.call_string_depth)
    }

    fn unit(&mut self, key: UnitKey) -> usize {
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let n = self.p.func(key.func).params.len();
        self.units.push(Unit { key: key.clone(), args: vec![Cell::default(); n], ret: Cell::default() });
        self.index.insert(key, self.units.len() - 1);
        self.changed = true;
        self.units.len() - 1
    }

    /// Marks the anchor's base pointer and, through parameters, the matching
    /// argument registers of each caller on the report trace.
    fn seed_object_roots(&mut self) {
        let p = self.p;
        let trace = &self.a.call_trace;
        let anchor = &trace[0];
        let f = p.func_id(&anchor.function).unwrap();
        let Some(Inst::Load { addr, .. }) = p.func(f).blocks[anchor.block].insts.get(anchor.index) else {
            return;
        };
        let regs = self.roots_before(f, anchor);
        let mut root = regs[addr.base.0 as usize].root;
        for site in &trace[1..] {
            let Some((r, _)) = root else { break };
            self.obj_roots.insert(r);
            let Root::Param(_, j) = r else { break };
            let cf = p.func_id(&site.function).unwrap();
            let args = match p.func(cf).blocks[site.block].insts.get(site.index) {
                Some(Inst::Call { args, .. } | Inst::ICall { args, .. }) => args.clone(),
                _ => break,
            };
            root = match args.get(j as usize) {
                Some(Operand::Reg(a)) => self.roots_before(cf, site)[a.0 as usize].root,
                _ => None,
            };
        }
        if let Some((r, _)) = root {
            self.obj_roots.insert(r);
        }
    }

    /// Must-roots of every register just before `at`, ignoring taint.
    fn roots_before(&mut self, f: FuncId, at: &Location) -> Regs {
        let func = self.p.func(f);
        let entry = Entry::Start(self.entry_regs(f, func, None));
        let (ins, _) = self.block_states(f, func, None, entry);
        let mut regs = ins[at.block].clone().unwrap_or_else(|| vec![Val::default(); func.num_regs as usize]);
        for (i, inst) in func.blocks[at.block].insts.iter().enumerate().take(at.index) {
            self.transfer(f, None, at.block, i, inst, &mut regs);
        }
        for v in regs.iter_mut() {
            v.cell = Cell::default();
        }
        regs
    }

    fn get(&self, regs: &Regs, r: Reg) -> Val {
        let mut v = regs[r.0 as usize];
        if let Some((root, _)) = v.root {
            if self.obj_roots.contains(&root) {
                v.cell.obj = true;
            }
        }
        v
    }

    fn op(&self, regs: &Regs, o: &Operand) -> Val {
        match o {
            Operand::Reg(r) => self.get(regs, *r),
            Operand::Imm(_) => Val::default(),
        }
    }

    fn key(&self, base: &Val, off: i64) -> Option<i64> {
        base.root.map(|(_, rel)| rel.wrapping_add(off))
    }

    fn read_mem(&self, key: Option<i64>) -> Cell {
        let mut c = self.mem_any;
        match key {
            Some(k) => {
                if let Some(x) = self.mem.get(&k) {
                    c.join(*x);
                }
            }
            None => {
                for x in self.mem.values() {
                    c.join(*x);
                }
            }
        }
        c
    }

    fn write_mem(&mut self, key: Option<i64>, v: Cell) {
        if v == Cell::default() {
            return;
        }
        let ch = match key {
            Some(k) => self.mem.entry(k).or_default().join(v),
            None => self.mem_any.join(v),
        };
        self.changed |= ch;
    }

    fn sink(&mut self, kind: PotentialKind, loc: Location) {
        if self.sinks.insert((kind, loc)) {
            self.changed = true;
        }
    }

    fn callee_ctx(&self, ctx: &[Location], site: Location) -> Vec<Location> {
        let mut v = vec![site];
        v.extend_from_slice(ctx);
        truncate(v, self.limits.call_string_depth)
    }

    /// Passes arguments to `callee` in context `ctx` and returns its summary.
    fn call(&mut self, callee: FuncId, ctx: Vec<Location>, args: &[Cell]) -> Cell {
        if self.p.func(callee).skip {
            return Cell { taint: true, obj: false };
        }
        let u = self.unit(UnitKey { func: callee, ctx, level: None });
        let mut ch = false;
        for (slot, a) in self.units[u].args.iter_mut().zip(args) {
            ch |= slot.join(*a);
        }
        self.changed |= ch;
        self.units[u].ret
    }

    /// Abstract transfer of one instruction. `ctx` is `None` in the
    /// root-only pre-pass, which has no side effects.
    fn transfer(&mut self, f: FuncId, ctx: Option<&[Location]>, block: usize, idx: usize, inst: &Inst, regs: &mut Regs) {
        let p = self.p;
        let live = ctx.is_some();
        let loc = || Location::new(p.func(f).name.clone(), block, idx);
        let def = Some((Root::Def(f.0, block as u32, idx as u32), 0i64));
        let set = |regs: &mut Regs, r: Reg, cell: Cell, root: Option<(Root, i64)>| {
            regs[r.0 as usize] = Val { cell: if live { cell } else { Cell::default() }, root };
        };
        match inst {
            Inst::Const { dst, .. } => set(regs, *dst, Cell::default(), None),
            Inst::Bin { op, dst, lhs, rhs } => {
                let (l, r) = (self.op(regs, lhs), self.op(regs, rhs));
                let mut cell = l.cell;
                cell.join(r.cell);
                let root = match (op, lhs, rhs) {
                    (BinOp::Add, Operand::Reg(_), Operand::Imm(c)) | (BinOp::Add, Operand::Imm(c), Operand::Reg(_)) => {
                        let v = if matches!(lhs, Operand::Reg(_)) { l } else { r };
                        v.root.map(|(rt, rel)| (rt, rel.wrapping_add(*c as i64)))
                    }
                    (BinOp::Sub, Operand::Reg(_), Operand::Imm(c)) => l.root.map(|(rt, rel)| (rt, rel.wrapping_sub(*c as i64))),
                    _ => def,
                };
                set(regs, *dst, cell, root);
            }
            Inst::Cmp { dst, lhs, rhs, .. } => {
                let t = self.op(regs, lhs).cell.taint | self.op(regs, rhs).cell.taint;
                set(regs, *dst, Cell { taint: t, obj: false }, def);
            }
            Inst::Load { dst, addr, .. } => {
                let b = self.get(regs, addr.base);
                let mut cell = if live { self.read_mem(self.key(&b, addr.offset)) } else { Cell::default() };
                cell.taint |= b.cell.taint | b.cell.obj;
                set(regs, *dst, cell, def);
            }
            Inst::Store { addr, value, .. } => {
                if !live {
                    return;
                }
                let b = self.get(regs, addr.base);
                let v = self.op(regs, value);
                if b.cell.taint {
                    self.sink(PotentialKind::WriteAddr, loc());
                }
                if v.cell.taint {
                    self.sink(PotentialKind::WriteValue, loc());
                }
                if b.cell.obj {
                    self.sink(PotentialKind::WriteToObject, loc());
                }
                let key = if b.cell.taint { None } else { self.key(&b, addr.offset) };
                self.write_mem(key, v.cell);
            }
            Inst::Alloc { dst, .. } => set(regs, *dst, Cell::default(), def),
            Inst::Free { ptr } => {
                let v = self.get(regs, *ptr);
                if live && (v.cell.taint || v.cell.obj) {
                    self.sink(PotentialKind::FreeTainted, loc());
                }
            }
            Inst::GLoad { dst, global } => {
                let c = if live { self.globals[global.0 as usize] } else { Cell::default() };
                set(regs, *dst, c, def);
            }
            Inst::GStore { global, value } => {
                if live {
                    let v = self.op(regs, value).cell;
                    self.changed |= self.globals[global.0 as usize].join(v);
                }
            }
            Inst::FnAddr { dst, .. } => set(regs, *dst, Cell::default(), def),
            Inst::Call { func, args, dst } => {
                let mut ret = Cell::default();
                if let Some(ctx) = ctx {
                    let cells: Vec<Cell> = args.iter().map(|a| self.op(regs, a).cell).collect();
                    let cctx = self.callee_ctx(ctx, loc());
                    ret = self.call(*func, cctx, &cells);
                }
                if let Some(d) = dst {
                    set(regs, *d, ret, def);
                }
            }
            Inst::ICall { target, args, dst } => {
                let mut ret = Cell::default();
                if let Some(ctx) = ctx {
                    if self.get(regs, *target).cell.taint {
                        self.sink(PotentialKind::Fpd, loc());
                        ret.taint = true;
                    } else {
                        let cells: Vec<Cell> = args.iter().map(|a| self.op(regs, a).cell).collect();
                        let cctx = self.callee_ctx(ctx, loc());
                        for g in self.address_taken.clone() {
                            ret.join(self.call(g, cctx.clone(), &cells));
                        }
                    }
                }
                if let Some(d) = dst {
                    set(regs, *d, ret, def);
                }
            }
            Inst::AssertFail(_) | Inst::Nop => {}
        }
    }

    /// Fixpoint over one function's blocks; returns each block's entry state
    /// and the joined return value.
    fn block_states(&mut self, f: FuncId, func: &Function, ctx: Option<&[Location]>, entry: Entry) -> (Vec<Option<Regs>>, Cell) {
        let n = func.blocks.len();
        let mut ins: Vec<Option<Regs>> = vec![None; n];
        let mut work: BTreeSet<usize> = BTreeSet::new();
        let mut ret = Cell::default();
        match entry {
            Entry::Resume(r) => {
                let mut regs = r.regs;
                if let Some((d, c)) = r.dst {
                    let root = Root::Def(f.0, r.block as u32, (r.index - 1) as u32);
                    regs[d.0 as usize] = Val { cell: c, root: Some((root, 0)) };
                }
                let b = &func.blocks[r.block];
                for (i, inst) in b.insts.iter().enumerate().skip(r.index) {
                    if !self.tick() {
                        return (ins, ret);
                    }
                    self.transfer(f, ctx, r.block, i, inst, &mut regs);
                }
                self.flow_out(&mut ins, &mut work, b.term, &regs, &mut ret);
            }
            Entry::Start(regs) => {
                ins[0] = Some(regs);
                work.insert(0);
            }
        }
        while let Some(bi) = work.pop_first() {
            let mut regs = ins[bi].clone().unwrap();
            let b = &func.blocks[bi];
            for (i, inst) in b.insts.iter().enumerate() {
                if !self.tick() {
                    return (ins, ret);
                }
                self.transfer(f, ctx, bi, i, inst, &mut regs);
            }
            self.flow_out(&mut ins, &mut work, b.term, &regs, &mut ret);
        }
        (ins, ret)
    }

    fn flow_out(&self, ins: &mut [Option<Regs>], work: &mut BTreeSet<usize>, term: Terminator, regs: &Regs, ret: &mut Cell) {
        if let Terminator::Ret(v) = term {
            ret.join(self.op(regs, &v).cell);
            return;
        }
        for s in term.successors() {
            let grew = match &mut ins[s] {
                Some(old) => join_regs(old, regs),
                slot @ None => {
                    *slot = Some(regs.clone());
                    true
                }
            };
            if grew {
                work.insert(s);
            }
        }
    }

    fn entry_regs(&self, f: FuncId, func: &Function, args: Option<&[Cell]>) -> Regs {
        let mut regs = vec![Val::default(); func.num_regs as usize];
        for (j, r) in func.params.iter().enumerate() {
            let cell = args.and_then(|a| a.get(j).copied()).unwrap_or_default();
            regs[r.0 as usize] = Val { cell, root: Some((Root::Param(f.0, j as u32), 0)) };
        }
        regs
    }

    fn tick(&mut self) -> bool {
        self.steps += 1;
        if self.steps > self.limits.max_steps {
            self.incomplete = true;
        }
        !self.incomplete
    }

    fn run_unit(&mut self, u: usize) {
        let key = self.units[u].key.clone();
        let func = self.p.func(key.func);
        let entry = match key.level {
            Some(level) => {
                let at = self.a.call_trace[level].clone();
                let regs = self.roots_before(key.func, &at);
                let inst = &func.blocks[at.block].insts[at.index];
                let dst = if level == 0 {
                    match inst {
                        Inst::Load { dst, .. } => Some((*dst, Cell { taint: true, obj: false })),
                        _ => None,
                    }
                } else {
                    let below = UnitKey {
                        func: self.p.func_id(&self.a.call_trace[level - 1].function).unwrap(),
                        ctx: self.trace_ctx(level - 1),
                        level: Some(level - 1),
                    };
                    let below = self.units[self.index[&below]].ret;
                    match inst {
                        Inst::Call { dst: Some(d), .. } | Inst::ICall { dst: Some(d), .. } => Some((*d, below)),
                        _ => None,
                    }
                };
                Entry::Resume(Resume { block: at.block, index: at.index + 1, regs, dst })
            }
            None => Entry::Start(self.entry_regs(key.func, func, Some(&self.units[u].args))),
        };
        let (_, ret) = self.block_states(key.func, func, Some(&key.ctx), entry);
        self.changed |= self.units[u].ret.join(ret);
    }
}
