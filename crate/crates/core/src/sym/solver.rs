//! Satisfiability of path constraints by bit-blasting to CNF.
//!
//! A check first evaluates the constraints under a hint model (usually the
//! state's current model). Only if that fails are the constraints sliced to
//! the component that shares symbols with the failing ones and handed to a
//! SAT solver; symbols outside the component keep their hint values.

use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use thiserror::Error;
use varisat::{ExtendFormula, Lit, Solver};

use crate::ir::{BinOp, CmpOp};

use super::expr::{Expr, Model, SymId, SymTable, E};

/// Clause budget for one check.
pub const MAX_CLAUSES: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SatResult {
    Sat(Model),
    Unsat,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SolverError {
    #[error("constraint encoding exceeds {MAX_CLAUSES} clauses")]
    FragmentExceeded,
}

/// One path constraint: the expression must be nonzero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constraint {
    pub expr: E,
    /// Null-page validity and plain zero tests of a value. Ignored when
    /// deciding whether an operand is constrained.
    pub null_test: bool,
}

/// A conjunction of constraints together with a satisfying model.
#[derive(Debug, Clone, Default)]
pub struct ConstraintStore {
    pub constraints: Vec<Constraint>,
    pub model: Model,
}

impl ConstraintStore {
    pub fn new(model: Model) -> Self {
        ConstraintStore { constraints: Vec::new(), model }
    }

    /// Whether the store plus `extra` is satisfiable, and a model if so.
    pub fn check_with(&self, table: &SymTable, extra: &[E]) -> Result<SatResult, SolverError> {
        let all: Vec<E> = self.constraints.iter().map(|c| c.expr.clone()).chain(extra.iter().cloned()).collect();
        check_sat(&all, table, &self.model)
    }

    /// Adds `c` if the result stays satisfiable. Returns false (and leaves
    /// the store unchanged) on Unsat.
    pub fn add(&mut self, table: &SymTable, c: Constraint) -> Result<bool, SolverError> {
        if let Some(v) = c.expr.as_const() {
            return Ok(v != 0);
        }
        match self.check_with(table, std::slice::from_ref(&c.expr))? {
            SatResult::Sat(m) => {
                self.model = m;
                self.constraints.push(c);
                Ok(true)
            }
            SatResult::Unsat => Ok(false),
        }
    }

    /// Symbols mentioned by constraints other than null tests.
    pub fn constrained_symbols(&self) -> BTreeSet<SymId> {
        self.constraints.iter().filter(|c| !c.null_test).flat_map(|c| c.expr.syms().iter().copied()).collect()
    }

    pub fn symbols(&self) -> BTreeSet<SymId> {
        self.constraints.iter().flat_map(|c| c.expr.syms().iter().copied()).collect()
    }
}

/// Decides the conjunction of `cs` (each must be nonzero). Symbols that no
/// solved constraint mentions keep their value in `hint`.
pub fn check_sat(cs: &[E], table: &SymTable, hint: &Model) -> Result<SatResult, SolverError> {
    let failing: Vec<usize> = (0..cs.len()).filter(|&i| cs[i].eval(hint) == 0).collect();
    if failing.is_empty() {
        return Ok(SatResult::Sat(hint.clone()));
    }
    // Close the failing constraints under shared symbols.
    let mut syms: BTreeSet<SymId> = BTreeSet::new();
    let mut chosen = vec![false; cs.len()];
    let mut frontier = failing;
    while let Some(i) = frontier.pop() {
        if chosen[i] {
            continue;
        }
        chosen[i] = true;
        if cs[i].syms().is_empty() {
            return Ok(SatResult::Unsat);
        }
        syms.extend(cs[i].syms().iter().copied());
        for (j, c) in cs.iter().enumerate() {
            if !chosen[j] && c.syms().iter().any(|s| syms.contains(s)) {
                frontier.push(j);
            }
        }
    }
    let slice: Vec<&E> = (0..cs.len()).filter(|&i| chosen[i]).map(|i| &cs[i]).collect();
    let mut b = Blaster::new(table);
    for c in &slice {
        let bits = b.bits(c)?;
        b.assert_nonzero(&bits);
    }
    match b.solver.solve() {
        Ok(true) => {}
        Ok(false) => return Ok(SatResult::Unsat),
        Err(_) => return Err(SolverError::FragmentExceeded),
    }
    let assignment: Vec<Lit> = b.solver.model().unwrap_or_default();
    let truth: HashMap<varisat::Var, bool> = assignment.iter().map(|l| (l.var(), l.is_positive())).collect();
    let mut model = hint.clone();
    for (s, lits) in &b.sym_bits {
        let v = lits.iter().enumerate().fold(0u64, |acc, (i, l)| {
            let bit = match truth.get(&l.var()) {
                Some(t) => *t == l.is_positive(),
                None => false,
            };
            acc | ((bit as u64) << i)
        });
        model.set(*s, v);
    }
    debug_assert!(slice.iter().all(|c| c.eval(&model) != 0));
    Ok(SatResult::Sat(model))
}

type Bits = Rc<[Lit; 64]>;

struct Blaster<'a> {
    table: &'a SymTable,
    solver: Solver<'static>,
    t: Lit,
    memo: HashMap<*const (), Bits>,
    /// Keeps memoized nodes alive so their addresses stay unique.
    keep: Vec<E>,
    sym_bits: std::collections::BTreeMap<SymId, Vec<Lit>>,
    clauses: usize,
}

impl<'a> Blaster<'a> {
    fn new(table: &'a SymTable) -> Self {
        let mut solver = Solver::new();
        let t = solver.new_lit();
        solver.add_clause(&[t]);
        Blaster { table, solver, t, memo: HashMap::new(), keep: Vec::new(), sym_bits: Default::default(), clauses: 1 }
    }

    fn f(&self) -> Lit {
        !self.t
    }

    fn lit_const(&self, b: bool) -> Lit {
        if b {
            self.t
        } else {
            !self.t
        }
    }

    fn konst(&self, l: Lit) -> Option<bool> {
        if l == self.t {
            Some(true)
        } else if l == !self.t {
            Some(false)
        } else {
            None
        }
    }

    fn clause(&mut self, c: &[Lit]) -> Result<(), SolverError> {
        self.clauses += 1;
        if self.clauses > MAX_CLAUSES {
            return Err(SolverError::FragmentExceeded);
        }
        self.solver.add_clause(c);
        Ok(())
    }

    fn and(&mut self, a: Lit, b: Lit) -> Result<Lit, SolverError> {
        match (self.konst(a), self.konst(b)) {
            (Some(false), _) | (_, Some(false)) => return Ok(self.f()),
            (Some(true), _) => return Ok(b),
            (_, Some(true)) => return Ok(a),
            _ => {}
        }
        if a == b {
            return Ok(a);
        }
        if a == !b {
            return Ok(self.f());
        }
        let c = self.solver.new_lit();
        self.clause(&[!c, a])?;
        self.clause(&[!c, b])?;
        self.clause(&[c, !a, !b])?;
        Ok(c)
    }

    fn or(&mut self, a: Lit, b: Lit) -> Result<Lit, SolverError> {
        Ok(!self.and(!a, !b)?)
    }

    fn xor(&mut self, a: Lit, b: Lit) -> Result<Lit, SolverError> {
        match (self.konst(a), self.konst(b)) {
            (Some(x), _) => return Ok(if x { !b } else { b }),
            (_, Some(y)) => return Ok(if y { !a } else { a }),
            _ => {}
        }
        if a == b {
            return Ok(self.f());
        }
        if a == !b {
            return Ok(self.t);
        }
        let c = self.solver.new_lit();
        self.clause(&[!c, a, b])?;
        self.clause(&[!c, !a, !b])?;
        self.clause(&[c, !a, b])?;
        self.clause(&[c, a, !b])?;
        Ok(c)
    }

    /// `s ? a : b`
    fn mux(&mut self, s: Lit, a: Lit, b: Lit) -> Result<Lit, SolverError> {
        match self.konst(s) {
            Some(true) => return Ok(a),
            Some(false) => return Ok(b),
            None => {}
        }
        if a == b {
            return Ok(a);
        }
        let x = self.and(s, a)?;
        let y = self.and(!s, b)?;
        self.or(x, y)
    }

    fn add_bits(&mut self, a: &[Lit; 64], b: &[Lit; 64], carry_in: Lit) -> Result<([Lit; 64], Lit), SolverError> {
        let mut out = [self.f(); 64];
        let mut c = carry_in;
        for i in 0..64 {
            let axb = self.xor(a[i], b[i])?;
            out[i] = self.xor(axb, c)?;
            let g = self.and(a[i], b[i])?;
            let p = self.and(axb, c)?;
            c = self.or(g, p)?;
        }
        Ok((out, c))
    }

    fn shift_const(&self, a: &[Lit; 64], s: u32, left: bool) -> [Lit; 64] {
        let mut out = [self.f(); 64];
        for (i, o) in out.iter_mut().enumerate() {
            let src = if left { i.checked_sub(s as usize) } else { Some(i + s as usize).filter(|&j| j < 64) };
            if let Some(j) = src {
                *o = a[j];
            }
        }
        out
    }

    fn bits(&mut self, e: &E) -> Result<Bits, SolverError> {
        let key = e.id();
        if let Some(b) = self.memo.get(&key) {
            return Ok(b.clone());
        }
        let out: [Lit; 64] = match e.expr() {
            Expr::Const(v) => std::array::from_fn(|i| self.lit_const((v >> i) & 1 == 1)),
            Expr::Sym(s) => {
                let w = self.table.width(*s) as usize * 8;
                let lits = match self.sym_bits.get(s) {
                    Some(l) => l.clone(),
                    None => {
                        let l: Vec<Lit> = (0..w).map(|_| self.solver.new_lit()).collect();
                        self.sym_bits.insert(*s, l.clone());
                        l
                    }
                };
                std::array::from_fn(|i| if i < w { lits[i] } else { self.f() })
            }
            Expr::Extract(a, k) => {
                let a = self.bits(a)?;
                let lo = 8 * *k as usize;
                std::array::from_fn(|i| if i < 8 { a[lo + i] } else { self.f() })
            }
            Expr::Concat(v) => {
                let mut out = [self.f(); 64];
                for (j, byte) in v.iter().enumerate().take(8) {
                    let b = self.bits(byte)?;
                    out[8 * j..8 * j + 8].copy_from_slice(&b[..8]);
                }
                out
            }
            Expr::Cmp(op, a, b) => {
                let a = self.bits(a)?;
                let b = self.bits(b)?;
                let bit = match op {
                    CmpOp::Eq => self.eq(&a, &b)?,
                    CmpOp::Ne => !self.eq(&a, &b)?,
                    CmpOp::Lt => self.ult(&a, &b)?,
                    CmpOp::Le => !self.ult(&b, &a)?,
                };
                std::array::from_fn(|i| if i == 0 { bit } else { self.f() })
            }
            Expr::Bin(op, a, b) => {
                let x = self.bits(a)?;
                let y = self.bits(b)?;
                self.bin(*op, &x, &y, b.as_const())?
            }
        };
        let out: Bits = Rc::new(out);
        self.memo.insert(key, out.clone());
        self.keep.push(e.clone());
        Ok(out)
    }

    fn bin(&mut self, op: BinOp, x: &[Lit; 64], y: &[Lit; 64], yc: Option<u64>) -> Result<[Lit; 64], SolverError> {
        let mut out = [self.f(); 64];
        match op {
            BinOp::Add => out = self.add_bits(x, y, self.f())?.0,
            BinOp::Sub => {
                let ny: [Lit; 64] = std::array::from_fn(|i| !y[i]);
                out = self.add_bits(x, &ny, self.t)?.0;
            }
            BinOp::And | BinOp::Or | BinOp::Xor => {
                for i in 0..64 {
                    out[i] = match op {
                        BinOp::And => self.and(x[i], y[i])?,
                        BinOp::Or => self.or(x[i], y[i])?,
                        _ => self.xor(x[i], y[i])?,
                    };
                }
            }
            BinOp::Mul => {
                for j in 0..64 {
                    if self.konst(y[j]) == Some(false) {
                        continue;
                    }
                    let shifted = self.shift_const(x, j as u32, true);
                    let mut part = [self.f(); 64];
                    for i in j..64 {
                        part[i] = self.and(shifted[i], y[j])?;
                    }
                    out = self.add_bits(&out, &part, self.f())?.0;
                }
            }
            BinOp::Shl | BinOp::Shr => {
                let left = op == BinOp::Shl;
                if let Some(s) = yc {
                    return Ok(if s >= 64 { out } else { self.shift_const(x, s as u32, left) });
                }
                let mut cur = *x;
                for k in 0..6 {
                    let sh = self.shift_const(&cur, 1 << k, left);
                    for i in 0..64 {
                        cur[i] = self.mux(y[k], sh[i], cur[i])?;
                    }
                }
                // Any higher amount bit set yields zero.
                let mut big = self.f();
                for &l in &y[6..] {
                    big = self.or(big, l)?;
                }
                for i in 0..64 {
                    out[i] = self.and(!big, cur[i])?;
                }
            }
        }
        Ok(out)
    }

    fn eq(&mut self, a: &[Lit; 64], b: &[Lit; 64]) -> Result<Lit, SolverError> {
        let mut r = self.t;
        for i in 0..64 {
            let d = self.xor(a[i], b[i])?;
            r = self.and(r, !d)?;
        }
        Ok(r)
    }

    /// Unsigned `a < b`: no carry out of `a + !b + 1`.
    fn ult(&mut self, a: &[Lit; 64], b: &[Lit; 64]) -> Result<Lit, SolverError> {
        let nb: [Lit; 64] = std::array::from_fn(|i| !b[i]);
        let (_, c) = self.add_bits(a, &nb, self.t)?;
        Ok(!c)
    }

    fn assert_nonzero(&mut self, bits: &[Lit; 64]) {
        let lits: Vec<Lit> = bits.iter().copied().filter(|l| self.konst(*l) != Some(false)).collect();
        if lits.iter().any(|l| self.konst(*l) == Some(true)) {
            return;
        }
        let f = self.f();
        // An empty clause makes the formula Unsat.
        self.solver.add_clause(if lits.is_empty() { std::slice::from_ref(&f) } else { &lits });
    }
}
