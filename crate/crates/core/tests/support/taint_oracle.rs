//! Brute-force path enumeration oracle for the static impact estimate.
//!
//! From the snapshot at each vulnerable read, a small interpreter forks at
//! every conditional branch and tracks byte-level dynamic taint seeded by the
//! vulnerable region. Because every branch is taken both ways and every value
//! read from the region counts as attacker-chosen, the region's concrete byte
//! values never influence which events are reached, so a grid over them
//! collapses to a single taint bit. Each reached store, indirect call or free
//! whose operands are tainted (or whose destination lies in the region) is a
//! dynamically reachable high-risk sink; all of them must appear in the
//! estimate. Enumeration covers the anchor's syscall, which is the scope of
//! both the estimate and the explorer.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::Rng;

use miniscope::exec::{execute, snapshot_at_first_vuln_read, ExecConfig, Heap, Selector, Snapshot, MAX_CALL_DEPTH, NULL_PAGE};
use miniscope::ir::{
    parse_program, parse_testcase, FuncId, Inst, Location, Operand, Program, Reg, Terminator, TestCase,
};
use miniscope::taint::{estimate_hidden_impacts, locate_vuln_point, TaintLimits};

pub const MAX_INSTRUCTIONS: usize = 200;
const MAX_PATHS: usize = 200_000;

#[derive(Debug, Clone, Copy)]
struct V {
    c: u64,
    t: bool,
}

#[derive(Clone)]
struct Frame {
    func: FuncId,
    block: usize,
    index: usize,
    regs: Vec<V>,
    ret_to: Option<Reg>,
}

#[derive(Clone)]
struct State {
    frames: Vec<Frame>,
    globals: Vec<V>,
    heap: Heap,
    tainted: HashSet<u64>,
}

struct Oracle<'a> {
    p: &'a Program,
    region: (u64, u64),
    sinks: BTreeSet<Location>,
    paths: usize,
}

impl<'a> Oracle<'a> {
    fn in_region(&self, a: u64) -> bool {
        a >= self.region.0 && a < self.region.1
    }

    fn op(&self, f: &Frame, o: &Operand) -> V {
        match *o {
            Operand::Reg(r) => f.regs[r.0 as usize],
            Operand::Imm(c) => V { c, t: false },
        }
    }

    fn run(&mut self, mut s: State) {
        loop {
            let Some(f) = s.frames.last() else { return };
            let func = self.p.func(f.func);
            let block = &func.blocks[f.block];
            let here = Location::new(func.name.clone(), f.block, f.index);
            if f.index == block.insts.len() {
                match block.term {
                    Terminator::Br(b) => {
                        let f = s.frames.last_mut().unwrap();
                        f.block = b;
                        f.index = 0;
                    }
                    Terminator::CondBr { then_to, else_to, .. } => {
                        let mut other = s.clone();
                        let f = other.frames.last_mut().unwrap();
                        f.block = else_to;
                        f.index = 0;
                        self.fork(other);
                        let f = s.frames.last_mut().unwrap();
                        f.block = then_to;
                        f.index = 0;
                    }
                    Terminator::Ret(o) => {
                        let v = self.op(f, &o);
                        let done = s.frames.pop().unwrap();
                        let Some(caller) = s.frames.last_mut() else { return };
                        if let Some(r) = done.ret_to {
                            caller.regs[r.0 as usize] = v;
                        }
                        caller.index += 1;
                    }
                }
                continue;
            }
            let inst = block.insts[f.index].clone();
            let f = s.frames.last().unwrap().clone();
            let set = |s: &mut State, r: Reg, v: V| s.frames.last_mut().unwrap().regs[r.0 as usize] = v;
            match &inst {
                Inst::Const { dst, value } => set(&mut s, *dst, V { c: *value, t: false }),
                Inst::Bin { op, dst, lhs, rhs } => {
                    let (a, b) = (self.op(&f, lhs), self.op(&f, rhs));
                    set(&mut s, *dst, V { c: op.eval(a.c, b.c), t: a.t || b.t });
                }
                Inst::Cmp { op, dst, lhs, rhs } => {
                    let (a, b) = (self.op(&f, lhs), self.op(&f, rhs));
                    set(&mut s, *dst, V { c: op.eval(a.c, b.c) as u64, t: a.t || b.t });
                }
                Inst::Load { dst, addr, width } => {
                    let base = f.regs[addr.base.0 as usize];
                    let a = base.c.wrapping_add(addr.offset as u64);
                    let v = if base.t {
                        V { c: 0, t: true }
                    } else {
                        if a < NULL_PAGE || !mapped(&s.heap, a, width.bytes()) {
                            return;
                        }
                        let t = (a..a + width.bytes()).any(|b| s.tainted.contains(&b));
                        V { c: s.heap.read(a, width.bytes()), t }
                    };
                    set(&mut s, *dst, v);
                }
                Inst::Store { addr, value, width } => {
                    let base = f.regs[addr.base.0 as usize];
                    let v = self.op(&f, value);
                    let a = base.c.wrapping_add(addr.offset as u64);
                    let into_region = !base.t && (a..a + width.bytes()).any(|b| self.in_region(b));
                    if base.t || v.t || into_region {
                        self.sinks.insert(here.clone());
                    }
                    if !base.t {
                        if a < NULL_PAGE || !mapped(&s.heap, a, width.bytes()) {
                            return;
                        }
                        s.heap.write(a, v.c, width.bytes());
                        for b in a..a + width.bytes() {
                            if v.t {
                                s.tainted.insert(b);
                            } else {
                                s.tainted.remove(&b);
                            }
                        }
                    }
                }
                Inst::Alloc { dst, size } => {
                    let n = self.op(&f, size).c;
                    let v = match s.heap.alloc(n, here.clone()) {
                        Some((_, base)) => V { c: base, t: false },
                        None => V { c: 0, t: false },
                    };
                    set(&mut s, *dst, v);
                }
                Inst::Free { ptr } => {
                    let v = f.regs[ptr.0 as usize];
                    if v.t || (!v.t && self.in_region(v.c)) {
                        self.sinks.insert(here.clone());
                    }
                }
                Inst::GLoad { dst, global } => {
                    let v = s.globals.get(global.0 as usize).copied().unwrap_or(V { c: 0, t: false });
                    set(&mut s, *dst, v);
                }
                Inst::GStore { global, value } => {
                    let v = self.op(&f, value);
                    let i = global.0 as usize;
                    if s.globals.len() <= i {
                        s.globals.resize(i + 1, V { c: 0, t: false });
                    }
                    s.globals[i] = v;
                }
                Inst::FnAddr { dst, func } => set(&mut s, *dst, V { c: self.p.function_address(*func), t: false }),
                Inst::Call { func, args, dst } => {
                    let args: Vec<V> = args.iter().map(|a| self.op(&f, a)).collect();
                    if !self.enter(&mut s, *func, args, *dst) {
                        set_ret(&mut s, *dst);
                    }
                    continue;
                }
                Inst::ICall { target, args, dst } => {
                    let t = f.regs[target.0 as usize];
                    if t.t {
                        self.sinks.insert(here.clone());
                        set_ret(&mut s, *dst);
                        continue;
                    }
                    let Some(func) = self.p.function_at(t.c) else { return };
                    let args: Vec<V> = args.iter().map(|a| self.op(&f, a)).collect();
                    if !self.enter(&mut s, func, args, *dst) {
                        set_ret(&mut s, *dst);
                    }
                    continue;
                }
                Inst::AssertFail(_) | Inst::Nop => {}
            }
            s.frames.last_mut().unwrap().index += 1;
        }
    }

    /// Pushes a frame for `func`; `false` if the call is skipped.
    fn enter(&self, s: &mut State, func: FuncId, args: Vec<V>, dst: Option<Reg>) -> bool {
        let callee = self.p.func(func);
        if callee.skip || s.frames.len() >= MAX_CALL_DEPTH {
            return false;
        }
        let mut regs = vec![V { c: 0, t: false }; callee.num_regs as usize];
        for (r, v) in callee.params.iter().zip(args) {
            regs[r.0 as usize] = v;
        }
        s.frames.push(Frame { func, block: 0, index: 0, regs, ret_to: dst });
        true
    }

    fn fork(&mut self, s: State) {
        self.paths += 1;
        assert!(self.paths < MAX_PATHS, "path enumeration exceeded {MAX_PATHS} paths");
        self.run(s);
    }
}

/// A skipped or unresolvable call returns an attacker-chosen value.
fn set_ret(s: &mut State, dst: Option<Reg>) {
    let f = s.frames.last_mut().unwrap();
    if let Some(r) = dst {
        f.regs[r.0 as usize] = V { c: 0, t: true };
    }
    f.index += 1;
}

fn mapped(h: &Heap, a: u64, width: u64) -> bool {
    use miniscope::exec::ByteClass;
    (a..a.saturating_add(width)).all(|b| !matches!(h.classify(b), ByteClass::Null | ByteClass::Unmapped))
}

/// High-risk sinks reachable from `snap` within its syscall.
pub fn enumerate(p: &Program, snap: &Snapshot) -> (BTreeSet<Location>, usize) {
    let start = snap.region_start();
    let region = (start, start + snap.region_len() as u64);
    let mut frames: Vec<Frame> = snap
        .state
        .frames
        .iter()
        .map(|f| Frame {
            func: f.func,
            block: f.block,
            index: f.index,
            regs: f.regs.iter().map(|&c| V { c, t: false }).collect(),
            ret_to: None,
        })
        .collect();
    // Restore return registers from each caller's pending call instruction.
    for i in 1..frames.len() {
        let caller = &frames[i - 1];
        let inst = &p.func(caller.func).blocks[caller.block].insts[caller.index];
        frames[i].ret_to = match inst {
            Inst::Call { dst, .. } | Inst::ICall { dst, .. } => *dst,
            _ => None,
        };
    }
    let state = State {
        frames,
        globals: snap.state.globals.iter().map(|&c| V { c, t: false }).collect(),
        heap: snap.state.heap.clone(),
        tainted: (region.0..region.1).collect(),
    };
    let mut o = Oracle { p, region, sinks: BTreeSet::new(), paths: 1 };
    o.run(state);
    (o.sinks, o.paths)
}

/// No CFG cycle in any function and no recursion through direct calls.
pub fn loop_free(p: &Program) -> bool {
    fn acyclic(n: usize, succ: &dyn Fn(usize) -> Vec<usize>) -> bool {
        // 0 unvisited, 1 on stack, 2 done.
        fn visit(v: usize, succ: &dyn Fn(usize) -> Vec<usize>, mark: &mut [u8]) -> bool {
            mark[v] = 1;
            for w in succ(v) {
                if mark[w] == 1 || (mark[w] == 0 && !visit(w, succ, mark)) {
                    return false;
                }
            }
            mark[v] = 2;
            true
        }
        let mut mark = vec![0u8; n];
        (0..n).all(|v| mark[v] != 0 || visit(v, succ, &mut mark))
    }
    let cfgs = p.functions.iter().all(|f| acyclic(f.blocks.len(), &|b| f.blocks[b].term.successors()));
    let calls = acyclic(p.functions.len(), &|i| {
        p.functions[i]
            .blocks
            .iter()
            .flat_map(|b| &b.insts)
            .filter_map(|inst| match inst {
                Inst::Call { func, .. } => Some(func.0 as usize),
                _ => None,
            })
            .collect()
    });
    cfgs && calls
}

pub fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

/// (name, program source, PoC source) for every corpus program.
pub fn programs() -> Vec<(String, String, String)> {
    let mut out = Vec::new();
    let read = |p: PathBuf| std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    for dir in [corpus(), corpus().join("sanitizer")] {
        let mut names: Vec<_> = std::fs::read_dir(&dir)
            .unwrap()
            .filter_map(|e| e.ok()?.file_name().to_str()?.strip_suffix(".mk").map(str::to_string))
            .collect();
        names.sort();
        for n in names {
            out.push((n.clone(), read(dir.join(format!("{n}.mk"))), read(dir.join(format!("{n}.poc")))));
        }
    }
    let mut sets: Vec<_> = std::fs::read_dir(corpus().join("versions")).unwrap().map(|e| e.unwrap().path()).collect();
    sets.sort();
    for d in sets {
        let n = format!("versions/{}", d.file_name().unwrap().to_string_lossy());
        out.push((n, read(d.join("base.mk")), read(d.join("context.poc"))));
    }
    out
}

/// A random loop-free program whose `use` syscall reads a freed object.
/// The object's stale bytes still hold pointers, so loads through it reach
/// mapped memory and the helper's address.
pub fn generated(rng: &mut impl Rng) -> String {
    use std::fmt::Write;
    const REGS: u32 = 8;
    let reg = |rng: &mut dyn rand::RngCore| format!("r{}", rng.gen_range(0..REGS));
    let body = |rng: &mut dyn rand::RngCore, out: &mut String, calls: bool| {
        for _ in 0..rng.gen_range(1..5) {
            let (d, a, b) = (reg(rng), reg(rng), reg(rng));
            let off = [0, 8, 16][rng.gen_range(0..3)];
            let line = match rng.gen_range(0..if calls { 12 } else { 9 }) {
                0 => format!("{d} = add {a}, {b}"),
                1 => format!("{d} = xor {a}, {}", rng.gen_range(0..4)),
                2 => format!("{d} = cmp eq {a}, {b}"),
                3 | 4 => format!("{d} = load {a}+{off}, 8"),
                5 => format!("store {a}+{off}, {b}, 8"),
                6 => format!("gstore h, {a}"),
                7 => format!("{d} = gload h"),
                8 => format!("{d} = alloc 24"),
                9 => format!("call helper({a}, {b}) -> {d}"),
                10 => format!("icall {a}({b}) -> {d}"),
                _ => format!("free {a}"),
            };
            writeln!(out, "  {line}").unwrap();
        }
    };
    let mut helper = String::from("fn helper(r0, r1) {\nbb0:\n");
    for r in 2..REGS {
        writeln!(helper, "  r{r} = const 0").unwrap();
    }
    body(rng, &mut helper, false);
    writeln!(helper, "  ret {}\n}}", reg(rng)).unwrap();

    let blocks = rng.gen_range(2..7);
    let mut use_fn = String::from("fn use() {\nbb0:\n  r0 = gload g\n  r1 = load r0, 8\n");
    for r in 2..REGS {
        writeln!(use_fn, "  r{r} = const {}", [0, 1, 8][r as usize % 3]).unwrap();
    }
    for b in 0..blocks {
        if b > 0 {
            writeln!(use_fn, "bb{b}:").unwrap();
        }
        body(rng, &mut use_fn, true);
        let last = b + 1 == blocks;
        let term = match rng.gen_range(0..3) {
            _ if last => format!("ret {}", reg(rng)),
            0 => format!("br bb{}", rng.gen_range(b + 1..blocks)),
            1 => format!("ret {}", reg(rng)),
            _ => format!(
                "condbr {}, bb{}, bb{}",
                reg(rng),
                rng.gen_range(b + 1..blocks),
                rng.gen_range(b + 1..blocks)
            ),
        };
        writeln!(use_fn, "  {term}").unwrap();
    }
    use_fn.push_str("}\n");
    format!(
        "program gen
global g
global h

{helper}

fn setup() {{
bb0:
  r0 = alloc 24
  r1 = alloc 24
  r2 = fnaddr helper
  store r0+8, r1, 8
  store r0+16, r2, 8
  store r1, r2, 8
  store r1+8, r0, 8
  gstore g, r0
  ret 0
}}

fn drop() {{
bb0:
  r0 = gload g
  free r0
  ret 0
}}

{use_fn}
entry setup
entry drop
entry use
"
    )
}

/// Checks every loop-free corpus program; returns the number of anchors.
pub fn check_corpus() -> usize {
    let mut checked = 0;
    for (name, src, poc) in programs() {
        let p = parse_program(&src).unwrap();
        let tc: TestCase = parse_testcase(&poc, &p).unwrap();
        if !loop_free(&p) || p.instruction_count() > MAX_INSTRUCTIONS {
            println!("{name}: skipped (loops or over {MAX_INSTRUCTIONS} instructions)");
            continue;
        }
        let cfg = ExecConfig::multi_shot();
        for imp in execute(&p, &tc, &cfg).impacts.iter().filter(|i| i.kind.is_vuln_read()) {
            let snap = snapshot_at_first_vuln_read(&p, &tc, &cfg, &Selector::Seq(imp.seq)).unwrap();
            let anchor = locate_vuln_point(&p, &snap.trigger).unwrap();
            let est = estimate_hidden_impacts(&p, &anchor, &TaintLimits::default());
            assert!(!est.incomplete, "{name}: estimate incomplete");
            let (dynamic, paths) = enumerate(&p, &snap);
            let missing: Vec<_> = dynamic.difference(&est.sinks()).map(|l| l.to_string()).collect();
            println!(
                "{name} @ {}: {paths} paths, {} dynamic sinks, {} static sinks",
                anchor.instruction,
                dynamic.len(),
                est.sinks().len()
            );
            assert!(missing.is_empty(), "{name} @ {}: estimate misses {missing:?}", anchor.instruction);
            checked += 1;
        }
    }
    checked
}


/// Checks `n` generated programs; returns (checked, with reachable sinks).
pub fn check_generated(n: usize) -> (usize, usize) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let tc = TestCase::new(vec![
        miniscope::ir::Call::new("setup", []),
        miniscope::ir::Call::new("drop", []),
        miniscope::ir::Call::new("use", []),
    ]);
    let cfg = ExecConfig::multi_shot();
    let (mut programs, mut with_sinks) = (0, 0);
    for _ in 0..n {
        let src = generated(&mut rng);
        let p = parse_program(&src).unwrap_or_else(|e| panic!("{e}\n{src}"));
        assert!(loop_free(&p));
        let Ok(snap) = snapshot_at_first_vuln_read(&p, &tc, &cfg, &Selector::FirstFlagged) else { continue };
        let anchor = locate_vuln_point(&p, &snap.trigger).unwrap();
        let est = estimate_hidden_impacts(&p, &anchor, &TaintLimits::default());
        let (dynamic, _) = enumerate(&p, &snap);
        let missing: Vec<_> = dynamic.difference(&est.sinks()).map(|l| l.to_string()).collect();
        assert!(missing.is_empty(), "estimate misses {missing:?} in\n{src}");
        programs += 1;
        with_sinks += usize::from(!dynamic.is_empty());
    }
    (programs, with_sinks)
}
