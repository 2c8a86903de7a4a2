use std::collections::BTreeSet;

use crate::ir::{AssertKind, FuncId, Inst, Location, Operand, Program, Reg, Terminator, TestCase};

use super::heap::{AccessCheck, FreeCheck, Heap};
use super::{
    Access, AccessKind, Edge, EventKind, ExecConfig, ExecResult, Impact, ImpactKind, Outcome, Selector, SiteEvent,
    Snapshot, ENTRY_EDGE, MAX_CALL_DEPTH,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub func: FuncId,
    pub block: usize,
    pub index: usize,
    pub regs: Vec<u64>,
    /// Location of the call instruction in the caller; `None` for the syscall frame.
    pub call_site: Option<Location>,
}

/// Everything needed to continue an execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineState {
    pub globals: Vec<u64>,
    pub heap: Heap,
    pub frames: Vec<Frame>,
    /// Index of the next syscall to start.
    pub next_call: usize,
    pub seq: u64,
    pub steps: u64,
}

impl MachineState {
    pub fn new(poison: u8) -> Self {
        MachineState { globals: Vec::new(), heap: Heap::new(poison), frames: Vec::new(), next_call: 0, seq: 0, steps: 0 }
    }

    /// Index of the syscall currently running.
    pub fn call_index(&self) -> usize {
        self.next_call.saturating_sub(1)
    }

    pub fn location(&self, p: &Program) -> Option<Location> {
        let f = self.frames.last()?;
        Some(Location::new(p.func(f.func).name.clone(), f.block, f.index))
    }

    /// Innermost-first call trace rooted at `loc`.
    pub fn call_trace(&self, loc: &Location) -> Vec<Location> {
        let mut t = vec![loc.clone()];
        t.extend(self.frames.iter().rev().filter_map(|f| f.call_site.clone()));
        t
    }
}

enum Flow {
    Continue,
    Stop(Outcome),
}

pub(super) struct Run<'a> {
    p: &'a Program,
    tc: &'a TestCase,
    cfg: &'a ExecConfig,
    st: MachineState,
    impacts: Vec<Impact>,
    coverage: BTreeSet<Edge>,
    events: Vec<SiteEvent>,
    outcome: Option<Outcome>,
    selector: Option<&'a Selector>,
    pub snapshot: Option<Snapshot>,
}

impl<'a> Run<'a> {
    pub fn new(
        p: &'a Program,
        tc: &'a TestCase,
        cfg: &'a ExecConfig,
        mut st: MachineState,
        selector: Option<&'a Selector>,
    ) -> Self {
        if st.globals.len() < p.globals.len() {
            st.globals.resize(p.globals.len(), 0);
        }
        Run {
            p,
            tc,
            cfg,
            st,
            impacts: Vec::new(),
            coverage: BTreeSet::new(),
            events: Vec::new(),
            outcome: None,
            selector,
            snapshot: None,
        }
    }

    pub fn finish(self) -> ExecResult {
        ExecResult {
            impacts: self.impacts,
            coverage: self.coverage,
            steps: self.st.steps,
            outcome: self.outcome.unwrap_or(Outcome::Completed),
            events: self.events,
        }
    }

    pub fn run(&mut self) {
        loop {
            if self.st.frames.is_empty() {
                let Some(call) = self.tc.calls.get(self.st.next_call) else {
                    self.outcome = Some(Outcome::Completed);
                    return;
                };
                self.st.next_call += 1;
                let Some(id) = self.p.entry(&call.syscall) else {
                    // Unchecked test cases may name non-entries; skip them.
                    continue;
                };
                let args: Vec<u64> = call.args.clone();
                self.push_frame(id, &args, None);
            }
            if self.st.steps >= self.cfg.step_budget {
                self.outcome = Some(Outcome::BudgetExhausted);
                return;
            }
            self.st.steps += 1;
            if let Flow::Stop(o) = self.step() {
                self.outcome = Some(o);
                return;
            }
        }
    }

    fn push_frame(&mut self, id: FuncId, args: &[u64], call_site: Option<Location>) {
        let f = self.p.func(id);
        let mut regs = vec![0u64; f.num_regs as usize];
        for (i, r) in f.params.iter().enumerate() {
            regs[r.0 as usize] = args.get(i).copied().unwrap_or(0);
        }
        self.coverage.insert(Edge { func: id.0, from: ENTRY_EDGE, to: 0 });
        self.st.frames.push(Frame { func: id, block: 0, index: 0, regs, call_site });
    }

    fn frame(&mut self) -> &mut Frame {
        self.st.frames.last_mut().unwrap()
    }

    fn reg(&self, r: Reg) -> u64 {
        self.st.frames.last().unwrap().regs[r.0 as usize]
    }

    fn val(&self, o: &Operand) -> u64 {
        match o {
            Operand::Reg(r) => self.reg(*r),
            Operand::Imm(v) => *v,
        }
    }

    fn set(&mut self, r: Reg, v: u64) {
        self.frame().regs[r.0 as usize] = v;
    }

    fn advance(&mut self) {
        self.frame().index += 1;
    }

    fn event(&mut self, loc: &Location, kind: EventKind) {
        if self.cfg.record_events {
            self.events.push(SiteEvent { location: loc.clone(), kind, step: self.st.steps });
        }
    }

    fn make_impact(&self, kind: ImpactKind, access: Access, loc: &Location, vuln: Option<(super::AllocId, i64)>, address: Option<u64>) -> Impact {
        let (vuln_alloc, offset, alloc_site, alloc_size) = match vuln {
            Some((id, off)) => {
                let a = self.st.heap.get(id);
                (Some(id), Some(off), Some(a.alloc_site.clone()), Some(a.size))
            }
            None => (None, None, None, None),
        };
        Impact {
            kind,
            access,
            location: loc.clone(),
            call_trace: self.st.call_trace(loc),
            vuln_alloc,
            alloc_site,
            alloc_size,
            offset,
            address,
            seq: self.st.seq,
            step: self.st.steps,
            call_index: self.st.call_index(),
        }
    }

    fn report(&mut self, imp: Impact) -> Flow {
        let kind = imp.kind;
        self.impacts.push(imp);
        self.st.seq += 1;
        if kind.is_irrecoverable() {
            Flow::Stop(Outcome::KilledIrrecoverable)
        } else if !self.cfg.multi_shot || (kind == ImpactKind::Bug && self.cfg.bug_is_fatal) {
            Flow::Stop(Outcome::Halted)
        } else {
            Flow::Continue
        }
    }

    /// Sanitizer check for a load or store; returns whether the access may proceed.
    fn check_access(&mut self, loc: &Location, addr: u64, width: u64, write: bool) -> Flow {
        let access = Access { kind: if write { AccessKind::Write } else { AccessKind::Read }, width: width as u8 };
        let (kind, vuln) = match self.st.heap.check(addr, width) {
            AccessCheck::Ok => return Flow::Continue,
            AccessCheck::NullDeref => (ImpactKind::NullDeref, None),
            AccessCheck::Gpf => (ImpactKind::Gpf, None),
            AccessCheck::Uaf { id, offset } => {
                (if write { ImpactKind::UafWrite } else { ImpactKind::UafRead }, Some((id, offset)))
            }
            AccessCheck::Oob { id, offset } => {
                (if write { ImpactKind::OobWrite } else { ImpactKind::OobRead }, Some((id, offset)))
            }
        };
        let imp = self.make_impact(kind, access, loc, vuln, Some(addr));
        if !write && kind.is_vuln_read() {
            if let Some(sel) = self.selector {
                if self.snapshot.is_none() && sel.matches(imp.seq, imp.alloc_site.as_ref().unwrap()) {
                    // Undo the step accounting so a resumed run re-executes this load.
                    let mut state = self.st.clone();
                    state.steps -= 1;
                    self.snapshot = Some(Snapshot {
                        state,
                        vuln_alloc: imp.vuln_alloc.unwrap(),
                        trigger: imp,
                        config: self.cfg.clone(),
                    });
                    return Flow::Stop(Outcome::Halted);
                }
            }
        }
        self.report(imp)
    }

    fn step(&mut self) -> Flow {
        let p = self.p;
        let fr = self.st.frames.last().unwrap();
        let func = p.func(fr.func);
        let block = &func.blocks[fr.block];
        if fr.index >= block.insts.len() {
            return self.terminate(fr.func, fr.block, block.term);
        }
        let loc = Location::new(func.name.clone(), fr.block, fr.index);
        let inst = &block.insts[fr.index];
        match inst {
            Inst::Const { dst, value } => self.set(*dst, *value),
            Inst::Bin { op, dst, lhs, rhs } => {
                let v = op.eval(self.val(lhs), self.val(rhs));
                self.set(*dst, v);
            }
            Inst::Cmp { op, dst, lhs, rhs } => {
                let v = op.eval(self.val(lhs), self.val(rhs)) as u64;
                self.set(*dst, v);
            }
            Inst::Load { dst, addr, width } => {
                let a = self.reg(addr.base).wrapping_add(addr.offset as u64);
                if let Flow::Stop(o) = self.check_access(&loc, a, width.bytes(), false) {
                    return Flow::Stop(o);
                }
                let v = self.st.heap.read(a, width.bytes());
                self.set(*dst, v);
            }
            Inst::Store { addr, value, width } => {
                let a = self.reg(addr.base).wrapping_add(addr.offset as u64);
                let v = self.val(value) & width.mask();
                self.event(&loc, EventKind::Store { addr: a, value: v, width: width.bytes() as u8 });
                if let Flow::Stop(o) = self.check_access(&loc, a, width.bytes(), true) {
                    return Flow::Stop(o);
                }
                self.st.heap.write(a, v, width.bytes());
            }
            Inst::Alloc { dst, size } => {
                let size = self.val(size);
                let base = self.st.heap.alloc(size, loc.clone()).map_or(0, |(_, b)| b);
                self.set(*dst, base);
            }
            Inst::Free { ptr } => {
                let ptr = self.reg(*ptr);
                self.event(&loc, EventKind::Free { ptr });
                let access = Access { kind: AccessKind::Free, width: 0 };
                match self.st.heap.check_free(ptr) {
                    FreeCheck::Ok(id) => self.st.heap.free(id, loc.clone()),
                    FreeCheck::Null => {}
                    FreeCheck::Invalid { id, offset } => {
                        let imp = self.make_impact(ImpactKind::InvalidFree, access, &loc, Some((id, offset)), Some(ptr));
                        if let Flow::Stop(o) = self.report(imp) {
                            return Flow::Stop(o);
                        }
                    }
                    FreeCheck::NullDeref | FreeCheck::Wild => {
                        let kind = if ptr < super::NULL_PAGE { ImpactKind::NullDeref } else { ImpactKind::Gpf };
                        let imp = self.make_impact(kind, access, &loc, None, Some(ptr));
                        return self.report(imp);
                    }
                }
            }
            Inst::GLoad { dst, global } => {
                let v = self.st.globals[global.0 as usize];
                self.set(*dst, v);
            }
            Inst::GStore { global, value } => {
                let v = self.val(value);
                self.st.globals[global.0 as usize] = v;
            }
            Inst::FnAddr { dst, func } => {
                let v = p.function_address(*func);
                self.set(*dst, v);
            }
            Inst::Call { func, args, dst } => {
                let args: Vec<u64> = args.iter().map(|a| self.val(a)).collect();
                return self.call(*func, &args, *dst, loc);
            }
            Inst::ICall { target, args, dst } => {
                let t = self.reg(*target);
                self.event(&loc, EventKind::ICall { target: t });
                let args: Vec<u64> = args.iter().map(|a| self.val(a)).collect();
                let Some(id) = p.function_at(t) else {
                    let kind = if t < super::NULL_PAGE { ImpactKind::NullDeref } else { ImpactKind::Gpf };
                    let access = Access { kind: AccessKind::Read, width: 8 };
                    let imp = self.make_impact(kind, access, &loc, None, Some(t));
                    return self.report(imp);
                };
                return self.call(id, &args, *dst, loc);
            }
            Inst::AssertFail(k) => {
                let kind = match k {
                    AssertKind::Warn => ImpactKind::Warn,
                    AssertKind::Bug => ImpactKind::Bug,
                };
                let imp = self.make_impact(kind, Access { kind: AccessKind::None, width: 0 }, &loc, None, None);
                if let Flow::Stop(o) = self.report(imp) {
                    return Flow::Stop(o);
                }
            }
            Inst::Nop => {}
        }
        self.advance();
        Flow::Continue
    }

    fn call(&mut self, id: FuncId, args: &[u64], dst: Option<Reg>, loc: Location) -> Flow {
        if self.st.frames.len() >= MAX_CALL_DEPTH {
            let imp = self.make_impact(ImpactKind::Bug, Access { kind: AccessKind::None, width: 0 }, &loc, None, None);
            if let Flow::Stop(o) = self.report(imp) {
                return Flow::Stop(o);
            }
            if let Some(d) = dst {
                self.set(d, 0);
            }
            self.advance();
            return Flow::Continue;
        }
        // The caller's index stays on the call until the callee returns.
        self.push_frame(id, args, Some(loc));
        Flow::Continue
    }

    fn terminate(&mut self, func: FuncId, block: usize, term: Terminator) -> Flow {
        let to = match term {
            Terminator::Br(t) => t,
            Terminator::CondBr { cond, then_to, else_to } => {
                if self.reg(cond) != 0 {
                    then_to
                } else {
                    else_to
                }
            }
            Terminator::Ret(v) => {
                let v = self.val(&v);
                self.st.frames.pop();
                if let Some(caller) = self.st.frames.last_mut() {
                    let f = self.p.func(caller.func);
                    if let Inst::Call { dst, .. } | Inst::ICall { dst, .. } = &f.blocks[caller.block].insts[caller.index] {
                        if let Some(d) = dst {
                            caller.regs[d.0 as usize] = v;
                        }
                    }
                    caller.index += 1;
                }
                return Flow::Continue;
            }
        };
        self.coverage.insert(Edge { func: func.0, from: block as u32, to: to as u32 });
        let f = self.frame();
        f.block = to;
        f.index = 0;
        Flow::Continue
    }
}
