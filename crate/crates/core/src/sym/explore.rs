//! Symbolic states and the worklist engine.

use std::collections::{BTreeSet, HashMap, VecDeque};

use crate::exec::{AccessCheck, AllocState, FreeCheck, Heap, Snapshot, MAX_CALL_DEPTH, NULL_PAGE};
use crate::ir::{BinOp, CmpOp, FuncId, Inst, Location, Operand, Program, Reg, Terminator};
use crate::taint::Direction;

use super::classify::{classify_event, Event, PrimitiveKind, RegionHit};
use super::expr::{Expr, Model, SymId, SymOrigin, SymTable, E};
use super::solver::{Constraint, ConstraintStore, SatResult, SolverError};
use super::{ExploreConfig, Finding, FindingModel, MemAssignment, RunPlan, RunStats};

#[derive(Debug, Clone)]
pub struct SymFrame {
    pub func: FuncId,
    pub block: usize,
    pub index: usize,
    pub regs: Vec<E>,
    pub call_site: Option<Location>,
}

/// A symbolic read through address `addr`.
#[derive(Debug, Clone)]
pub(super) struct MemRead {
    pub addr: E,
    pub width: u8,
    pub sym: SymId,
}

#[derive(Debug, Clone)]
pub struct SymState {
    pub frames: Vec<SymFrame>,
    /// Allocation bookkeeping; byte contents written during exploration live
    /// in `overlay`.
    pub heap: Heap,
    pub globals: Vec<E>,
    pub overlay: HashMap<u64, E>,
    pub(super) mem: Vec<MemRead>,
    pub store: ConstraintStore,
    pub steps: u64,
    forks: HashMap<Location, u32>,
    /// Sites of loads through symbolic addresses.
    pub notes: Vec<Location>,
}

impl SymState {
    fn frame(&self) -> &SymFrame {
        self.frames.last().unwrap()
    }

    fn frame_mut(&mut self) -> &mut SymFrame {
        self.frames.last_mut().unwrap()
    }

    fn reg(&self, r: Reg) -> E {
        self.frame().regs[r.0 as usize].clone()
    }

    fn val(&self, o: &Operand) -> E {
        match o {
            Operand::Reg(r) => self.reg(*r),
            Operand::Imm(v) => E::konst(*v),
        }
    }

    fn set(&mut self, r: Reg, v: E) {
        self.frame_mut().regs[r.0 as usize] = v;
    }

    fn advance(&mut self) {
        self.frame_mut().index += 1;
    }

    fn read_concrete(&self, addr: u64, width: u64) -> E {
        let bytes = (0..width)
            .map(|i| {
                let a = addr.wrapping_add(i);
                self.overlay.get(&a).cloned().unwrap_or_else(|| E::konst(self.heap.read_byte(a) as u64))
            })
            .collect();
        E::concat(bytes)
    }

    /// Quarantined bytes keep their stale contents, as in the concrete run.
    fn write_concrete(&mut self, addr: u64, value: &E, width: u64) {
        for i in 0..width {
            let a = addr.wrapping_add(i);
            if let crate::exec::ByteClass::Object { freed: true, .. } = self.heap.classify(a) {
                continue;
            }
            self.overlay.insert(a, value.extract(i as u8));
        }
    }

    /// Innermost call sites, for matching guided branches.
    fn context(&self, depth: usize) -> Vec<Location> {
        self.frames.iter().rev().filter_map(|f| f.call_site.clone()).take(depth).collect()
    }
}

/// A finding awaiting validation, with the expressions it was derived from.
pub(super) struct Pending {
    pub finding: Finding,
    pub constraints: Vec<E>,
    pub mem: Vec<MemRead>,
    pub operand: Option<E>,
    pub model: Model,
}

enum Step {
    Continue,
    Done,
    Forked(Box<SymState>),
}

pub(super) struct Engine<'a> {
    p: &'a Program,
    snap: &'a Snapshot,
    plan: &'a RunPlan,
    cfg: &'a ExploreConfig,
    pub table: SymTable,
    pub pending: Vec<Pending>,
    seen: BTreeSet<(Location, PrimitiveKind)>,
    queue: VecDeque<SymState>,
    created: u64,
    steps: u64,
    incomplete: bool,
    stopped: bool,
    fork_cap_kills: u64,
    fragment_exceeded: u64,
    base_depth: usize,
    region: (u64, u64),
}

impl<'a> Engine<'a> {
    pub fn new(p: &'a Program, snap: &'a Snapshot, plan: &'a RunPlan, cfg: &'a ExploreConfig) -> Self {
        let mut table = SymTable::default();
        let start = snap.region_start();
        let stale = snap.region_bytes();
        let mut overlay = HashMap::new();
        let mut model = Model::default();
        for (i, b) in stale.iter().enumerate() {
            let s = table.add(SymOrigin::Obj { index: i }, 1, None);
            overlay.insert(start + i as u64, E::sym(s));
            model.set(s, *b as u64);
        }
        let st = &snap.state;
        let frames = st
            .frames
            .iter()
            .map(|f| SymFrame {
                func: f.func,
                block: f.block,
                index: f.index,
                regs: f.regs.iter().map(|v| E::konst(*v)).collect(),
                call_site: f.call_site.clone(),
            })
            .collect();
        let mut globals: Vec<E> = st.globals.iter().map(|v| E::konst(*v)).collect();
        globals.resize(p.globals.len().max(globals.len()), E::konst(0));
        let init = SymState {
            frames,
            heap: st.heap.clone(),
            globals,
            overlay,
            mem: Vec::new(),
            store: ConstraintStore::new(model),
            steps: 0,
            forks: HashMap::new(),
            notes: Vec::new(),
        };
        Engine {
            p,
            snap,
            plan,
            cfg,
            table,
            pending: Vec::new(),
            seen: BTreeSet::new(),
            queue: VecDeque::from([init]),
            created: 1,
            steps: 0,
            incomplete: false,
            stopped: false,
            fork_cap_kills: 0,
            fragment_exceeded: 0,
            base_depth: st.frames.len(),
            region: (start, stale.len() as u64),
        }
    }

    pub fn stats(&self) -> RunStats {
        RunStats {
            trace_id: self.plan.trace_id,
            states: self.created,
            steps: self.steps,
            incomplete: self.incomplete,
            fork_cap_kills: self.fork_cap_kills,
            fragment_exceeded: self.fragment_exceeded,
        }
    }

    pub fn run(&mut self) {
        while let Some(s) = self.queue.pop_front() {
            if self.stopped {
                break;
            }
            self.run_state(s);
        }
    }

    fn run_state(&mut self, mut s: SymState) {
        loop {
            if s.frames.is_empty() {
                return;
            }
            if s.steps >= self.cfg.step_budget {
                self.incomplete = true;
                return;
            }
            s.steps += 1;
            self.steps += 1;
            match self.step(&mut s) {
                Ok(Step::Continue) => {}
                Ok(Step::Done) => return,
                Ok(Step::Forked(child)) => {
                    self.queue.push_back(s);
                    self.queue.push_back(*child);
                    return;
                }
                Err(SolverError::FragmentExceeded) => {
                    self.fragment_exceeded += 1;
                    self.incomplete = true;
                    return;
                }
            }
        }
    }

    fn step(&mut self, s: &mut SymState) -> Result<Step, SolverError> {
        let p = self.p;
        let fr = s.frame();
        let func = p.func(fr.func);
        let block = &func.blocks[fr.block];
        if fr.index >= block.insts.len() {
            let loc = Location::new(func.name.clone(), fr.block, fr.index);
            return self.terminator(s, block.term, loc);
        }
        let loc = Location::new(func.name.clone(), fr.block, fr.index);
        match &block.insts[fr.index] {
            Inst::Const { dst, value } => s.set(*dst, E::konst(*value)),
            Inst::Bin { op, dst, lhs, rhs } => {
                let v = E::bin(*op, &s.val(lhs), &s.val(rhs));
                s.set(*dst, v);
            }
            Inst::Cmp { op, dst, lhs, rhs } => {
                let v = E::cmp(*op, &s.val(lhs), &s.val(rhs));
                s.set(*dst, v);
            }
            Inst::Load { dst, addr, width } => {
                let a = E::bin(BinOp::Add, &s.reg(addr.base), &E::konst(addr.offset as u64));
                let w = width.bytes();
                let v = match a.as_const() {
                    Some(ca) => {
                        if matches!(s.heap.check(ca, w), AccessCheck::NullDeref | AccessCheck::Gpf) {
                            return Ok(Step::Done);
                        }
                        s.read_concrete(ca, w)
                    }
                    None => match self.load_symbolic_address(s, &a, w as u8, &loc)? {
                        Some(v) => v,
                        None => return Ok(Step::Done),
                    },
                };
                s.set(*dst, v);
            }
            Inst::Store { addr, value, width } => {
                let a = E::bin(BinOp::Add, &s.reg(addr.base), &E::konst(addr.offset as u64));
                let w = width.bytes();
                let v = E::bin(BinOp::And, &s.val(value), &E::konst(width.mask()));
                let mut region = RegionHit::Outside;
                if let Some(ca) = a.as_const() {
                    let check = s.heap.check(ca, w);
                    if matches!(check, AccessCheck::NullDeref | AccessCheck::Gpf) {
                        return Ok(Step::Done);
                    }
                    region = self.region_hit(ca, w, check);
                }
                let kinds = classify_event(
                    &Event::Store { addr: a.syms(), value: v.syms(), region },
                    &s.store.constrained_symbols(),
                );
                for k in kinds {
                    let operand = match k {
                        PrimitiveKind::Aaw | PrimitiveKind::Caw => Some(a.clone()),
                        PrimitiveKind::Avw | PrimitiveKind::Cvw => Some(v.clone()),
                        _ => None,
                    };
                    self.emit(s, &loc, k, operand)?;
                }
                if let Some(ca) = a.as_const() {
                    s.write_concrete(ca, &v, w);
                }
            }
            Inst::Alloc { dst, size } => {
                let size = s.val(size);
                let n = match size.as_const() {
                    Some(n) => n,
                    None => {
                        let n = size.eval(&s.store.model);
                        let pin = Constraint { expr: E::cmp(CmpOp::Eq, &size, &E::konst(n)), null_test: false };
                        if !s.store.add(&self.table, pin)? {
                            return Ok(Step::Done);
                        }
                        n
                    }
                };
                let base = s.heap.alloc(n, loc.clone()).map_or(0, |(_, b)| b);
                s.set(*dst, E::konst(base));
            }
            Inst::Free { ptr } => {
                let ptr = s.reg(*ptr);
                let into_freed = ptr.as_const().is_some_and(|c| self.in_region(c, 1) && self.vuln_freed(s));
                let kinds =
                    classify_event(&Event::Free { ptr: ptr.syms(), into_freed_region: into_freed }, &BTreeSet::new());
                for k in kinds {
                    self.emit(s, &loc, k, Some(ptr.clone()))?;
                }
                let Some(c) = ptr.as_const() else {
                    return Ok(Step::Done);
                };
                match s.heap.check_free(c) {
                    FreeCheck::Ok(id) => s.heap.free(id, loc.clone()),
                    FreeCheck::Null | FreeCheck::Invalid { .. } => {}
                    FreeCheck::NullDeref | FreeCheck::Wild => return Ok(Step::Done),
                }
            }
            Inst::GLoad { dst, global } => {
                let v = s.globals[global.0 as usize].clone();
                s.set(*dst, v);
            }
            Inst::GStore { global, value } => {
                let v = s.val(value);
                s.globals[global.0 as usize] = v;
            }
            Inst::FnAddr { dst, func } => s.set(*dst, E::konst(p.function_address(*func))),
            Inst::Call { func, args, dst } => {
                let args: Vec<E> = args.iter().map(|a| s.val(a)).collect();
                return Ok(self.call(s, *func, args, *dst, loc));
            }
            Inst::ICall { target, args, dst } => {
                let t = s.reg(*target);
                if t.is_symbolic() {
                    self.emit(s, &loc, PrimitiveKind::Fpd, Some(t))?;
                    return Ok(Step::Done);
                }
                let Some(id) = p.function_at(t.as_const().unwrap()) else {
                    return Ok(Step::Done);
                };
                if self.plan.stop_after.as_ref() == Some(&loc) {
                    return Ok(Step::Done);
                }
                let args: Vec<E> = args.iter().map(|a| s.val(a)).collect();
                return Ok(self.call(s, id, args, *dst, loc));
            }
            Inst::AssertFail(_) | Inst::Nop => {}
        }
        s.advance();
        if self.plan.stop_after.as_ref() == Some(&loc) {
            return Ok(Step::Done);
        }
        Ok(Step::Continue)
    }

    fn call(&mut self, s: &mut SymState, id: FuncId, args: Vec<E>, dst: Option<Reg>, loc: Location) -> Step {
        let f = self.p.func(id);
        if f.skip || s.frames.len() >= MAX_CALL_DEPTH {
            if let Some(d) = dst {
                let v = if f.skip {
                    E::sym(self.table.add(SymOrigin::Skip { function: f.name.clone() }, 8, None))
                } else {
                    E::konst(0)
                };
                s.set(d, v);
            }
            s.advance();
            return Step::Continue;
        }
        let mut regs = vec![E::konst(0); f.num_regs as usize];
        for (i, r) in f.params.iter().enumerate() {
            regs[r.0 as usize] = args.get(i).cloned().unwrap_or_else(|| E::konst(0));
        }
        s.frames.push(SymFrame { func: id, block: 0, index: 0, regs, call_site: Some(loc) });
        Step::Continue
    }

    fn terminator(&mut self, s: &mut SymState, term: Terminator, loc: Location) -> Result<Step, SolverError> {
        let (then_to, else_to, cond) = match term {
            Terminator::Br(t) => {
                s.frame_mut().block = t;
                s.frame_mut().index = 0;
                return Ok(Step::Continue);
            }
            Terminator::Ret(v) => return Ok(self.ret(s, &v)),
            Terminator::CondBr { cond, then_to, else_to } => (then_to, else_to, s.reg(cond)),
        };
        let goto = |s: &mut SymState, taken: bool| {
            let f = s.frame_mut();
            f.block = if taken { then_to } else { else_to };
            f.index = 0;
        };
        if let Some(c) = cond.as_const() {
            goto(s, c != 0);
            return Ok(Step::Continue);
        }
        let yes = cond.truthy();
        let no = yes.not();
        let null_test = is_zero_test(&cond);
        let key = (s.context(self.cfg.call_string_depth), loc.clone());
        if let Some(dir) = self.plan.required.get(&key) {
            let c = if dir.is_taken() { yes } else { no };
            if !s.store.add(&self.table, Constraint { expr: c, null_test })? {
                return Ok(Step::Done);
            }
            goto(s, *dir == Direction::Taken);
            return Ok(Step::Continue);
        }
        let sat = |s: &SymState, e: &E| -> Result<Option<Model>, SolverError> {
            Ok(match s.store.check_with(&self.table, std::slice::from_ref(e))? {
                SatResult::Sat(m) => Some(m),
                SatResult::Unsat => None,
            })
        };
        let mt = sat(s, &yes)?;
        let mf = sat(s, &no)?;
        match (mt, mf) {
            (Some(mt), Some(mf)) => {
                let n = s.forks.get(&loc).copied().unwrap_or(0);
                if n >= self.cfg.fork_cap {
                    self.fork_cap_kills += 1;
                    self.incomplete = true;
                    return Ok(Step::Done);
                }
                if self.created >= self.cfg.state_budget {
                    self.incomplete = true;
                    self.stopped = true;
                    return Ok(Step::Done);
                }
                self.created += 1;
                s.forks.insert(loc, n + 1);
                let mut child = s.clone();
                s.store.constraints.push(Constraint { expr: yes, null_test });
                s.store.model = mt;
                goto(s, true);
                child.store.constraints.push(Constraint { expr: no, null_test });
                child.store.model = mf;
                goto(&mut child, false);
                Ok(Step::Forked(Box::new(child)))
            }
            (Some(m), None) | (None, Some(m)) => {
                let taken = yes.eval(&m) != 0;
                s.store.constraints.push(Constraint { expr: if taken { yes } else { no }, null_test });
                s.store.model = m;
                goto(s, taken);
                Ok(Step::Continue)
            }
            (None, None) => Ok(Step::Done),
        }
    }

    fn ret(&mut self, s: &mut SymState, v: &Operand) -> Step {
        let v = s.val(v);
        s.frames.pop();
        let depth = s.frames.len() as i64 - self.base_depth as i64;
        if s.frames.is_empty() || self.plan.scope_depth.is_some_and(|d| depth < d) {
            return Step::Done;
        }
        let caller = s.frames.last_mut().unwrap();
        let f = self.p.func(caller.func);
        if let Inst::Call { dst: Some(d), .. } | Inst::ICall { dst: Some(d), .. } =
            &f.blocks[caller.block].insts[caller.index]
        {
            caller.regs[d.0 as usize] = v;
        }
        caller.index += 1;
        Step::Continue
    }

    /// Fresh content for a read through a symbolic address; the same
    /// address expression and width always yield the same symbol.
    fn load_symbolic_address(
        &mut self,
        s: &mut SymState,
        addr: &E,
        width: u8,
        loc: &Location,
    ) -> Result<Option<E>, SolverError> {
        if let Some(m) = s.mem.iter().find(|m| m.width == width && &m.addr == addr) {
            return Ok(Some(E::sym(m.sym)));
        }
        let valid = E::cmp(CmpOp::Le, &E::konst(NULL_PAGE), addr);
        if !s.store.add(&self.table, Constraint { expr: valid, null_test: true })? {
            return Ok(None);
        }
        let k = s.mem.len();
        let sym = self.table.add(SymOrigin::Mem { k }, width, Some(addr.clone()));
        s.mem.push(MemRead { addr: addr.clone(), width, sym });
        s.notes.push(loc.clone());
        Ok(Some(E::sym(sym)))
    }

    fn in_region(&self, addr: u64, width: u64) -> bool {
        let (lo, len) = self.region;
        addr < lo + len && addr.saturating_add(width) > lo
    }

    fn vuln_freed(&self, s: &SymState) -> bool {
        s.heap.get(self.snap.vuln_alloc).state == AllocState::Freed
    }

    fn region_hit(&self, addr: u64, width: u64, check: AccessCheck) -> RegionHit {
        if !self.in_region(addr, width) {
            return RegionHit::Outside;
        }
        match check {
            AccessCheck::Uaf { id, .. } | AccessCheck::Oob { id, .. } if id == self.snap.vuln_alloc => {
                RegionHit::Flagged
            }
            _ => RegionHit::Live,
        }
    }

    fn emit(&mut self, s: &SymState, loc: &Location, kind: PrimitiveKind, operand: Option<E>) -> Result<(), SolverError> {
        let mut kind = kind;
        if self.cfg.range_probe && matches!(kind, PrimitiveKind::Aaw | PrimitiveKind::Avw) {
            if let Some(e) = &operand {
                if !self.spans_range(s, e)? {
                    kind = kind.constrained();
                }
            }
        }
        if !self.seen.insert((loc.clone(), kind)) {
            return Ok(());
        }
        let model = s.store.model.clone();
        let finding = Finding {
            primitive: kind,
            site: loc.clone(),
            context_id: 0,
            constraints: s.store.constraints.iter().map(|c| c.expr.render(&self.table)).collect(),
            model: finding_model(&self.table, self.region.1 as usize, &s.mem, operand.as_ref(), &model),
            validated: false,
            state_count: self.created,
            trace_id: self.plan.trace_id,
        };
        self.pending.push(Pending {
            finding,
            constraints: s.store.constraints.iter().map(|c| c.expr.clone()).collect(),
            mem: s.mem.clone(),
            operand,
            model,
        });
        Ok(())
    }

    /// Whether `e` can be both a low user-space-like address and a high one.
    fn spans_range(&self, s: &SymState, e: &E) -> Result<bool, SolverError> {
        let low = E::bin(
            BinOp::And,
            &E::cmp(CmpOp::Le, &E::konst(NULL_PAGE), e),
            &E::cmp(CmpOp::Lt, e, &E::konst(1 << 32)),
        );
        let high = E::cmp(CmpOp::Le, &E::konst(1 << 63), e);
        for c in [low, high] {
            if s.store.check_with(&self.table, &[c])? == SatResult::Unsat {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Zero tests of a plain value (`if (p)`, `x == 0`) do not count as
/// constraining it.
fn is_zero_test(cond: &E) -> bool {
    match cond.expr() {
        Expr::Cmp(CmpOp::Eq | CmpOp::Ne, a, b) => a.as_const() == Some(0) || b.as_const() == Some(0),
        Expr::Cmp(..) => false,
        _ => true,
    }
}

pub(super) fn finding_model(
    table: &SymTable,
    region_len: usize,
    mem: &[MemRead],
    operand: Option<&E>,
    model: &Model,
) -> FindingModel {
    let object: String = (0..region_len).map(|i| format!("{:02x}", model.get(i as SymId) as u8)).collect();
    let mem = mem
        .iter()
        .map(|m| MemAssignment {
            name: table.name(m.sym),
            addr: m.addr.eval(model),
            width: m.width,
            value: model.get(m.sym),
        })
        .collect();
    FindingModel { object, mem, operand: operand.map(|e| e.eval(model)) }
}
