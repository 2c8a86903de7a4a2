//! Symbolic 64-bit expressions with eager constant folding.
//!
//! Every expression denotes a 64-bit value. Symbols are zero-extended
//! unsigned values of their declared byte width; comparisons yield 0 or 1;
//! `Extract` yields one byte; `Concat` assembles little-endian bytes.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::ir::{BinOp, CmpOp};

pub type SymId = u32;

#[derive(Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Const(u64),
    Sym(SymId),
    Bin(BinOp, E, E),
    Cmp(CmpOp, E, E),
    /// Byte `i` of the operand.
    Extract(E, u8),
    /// Little-endian bytes, each below 256.
    Concat(Vec<E>),
}

#[derive(Debug)]
struct Node {
    expr: Expr,
    hash: u64,
    syms: Rc<BTreeSet<SymId>>,
}

/// Shared handle to an expression node.
#[derive(Debug, Clone)]
pub struct E(Rc<Node>);

impl PartialEq for E {
    fn eq(&self, o: &E) -> bool {
        Rc::ptr_eq(&self.0, &o.0) || (self.0.hash == o.0.hash && self.0.expr == o.0.expr)
    }
}

impl Eq for E {}

impl Hash for E {
    fn hash<H: Hasher>(&self, h: &mut H) {
        h.write_u64(self.0.hash);
    }
}

fn node_hash(e: &Expr) -> u64 {
    let mut h = DefaultHasher::new();
    match e {
        Expr::Const(v) => (0u8, v).hash(&mut h),
        Expr::Sym(s) => (1u8, s).hash(&mut h),
        Expr::Bin(op, a, b) => (2u8, op, a.0.hash, b.0.hash).hash(&mut h),
        Expr::Cmp(op, a, b) => (3u8, op, a.0.hash, b.0.hash).hash(&mut h),
        Expr::Extract(a, i) => (4u8, a.0.hash, i).hash(&mut h),
        Expr::Concat(v) => {
            5u8.hash(&mut h);
            for x in v {
                x.0.hash.hash(&mut h);
            }
        }
    }
    h.finish()
}

fn mk(expr: Expr) -> E {
    let syms = match &expr {
        Expr::Const(_) => Rc::new(BTreeSet::new()),
        Expr::Sym(s) => Rc::new(BTreeSet::from([*s])),
        Expr::Bin(_, a, b) | Expr::Cmp(_, a, b) => union(&[a, b]),
        Expr::Extract(a, _) => a.0.syms.clone(),
        Expr::Concat(v) => union(&v.iter().collect::<Vec<_>>()),
    };
    let hash = node_hash(&expr);
    E(Rc::new(Node { expr, hash, syms }))
}

fn union(xs: &[&E]) -> Rc<BTreeSet<SymId>> {
    let nonempty: Vec<&&E> = xs.iter().filter(|x| !x.0.syms.is_empty()).collect();
    match nonempty.as_slice() {
        [] => Rc::new(BTreeSet::new()),
        [one] => one.0.syms.clone(),
        many => Rc::new(many.iter().flat_map(|x| x.0.syms.iter().copied()).collect()),
    }
}

impl E {
    pub fn konst(v: u64) -> E {
        mk(Expr::Const(v))
    }

    pub fn sym(s: SymId) -> E {
        mk(Expr::Sym(s))
    }

    /// Address of the shared node; stable while any handle is alive.
    pub fn id(&self) -> *const () {
        Rc::as_ptr(&self.0) as *const ()
    }

    pub fn expr(&self) -> &Expr {
        &self.0.expr
    }

    pub fn as_const(&self) -> Option<u64> {
        match self.0.expr {
            Expr::Const(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_symbolic(&self) -> bool {
        !self.0.syms.is_empty()
    }

    pub fn syms(&self) -> &BTreeSet<SymId> {
        &self.0.syms
    }

    pub fn bin(op: BinOp, a: &E, b: &E) -> E {
        use BinOp::*;
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            return E::konst(op.eval(x, y));
        }
        match (op, a.as_const(), b.as_const()) {
            (Add, Some(0), _) | (Or, Some(0), _) | (Xor, Some(0), _) | (Mul, Some(1), _) => return b.clone(),
            (Add | Sub | Or | Xor | Shl | Shr, _, Some(0)) | (Mul, _, Some(1)) | (And, _, Some(u64::MAX)) => {
                return a.clone()
            }
            (And, Some(u64::MAX), _) => return b.clone(),
            (Mul | And, Some(0), _) | (Mul | And, _, Some(0)) => return E::konst(0),
            (Shl | Shr, _, Some(s)) if s >= 64 => return E::konst(0),
            (Shl | Shr, Some(0), _) => return E::konst(0),
            _ => {}
        }
        if op == Sub {
            if a == b {
                return E::konst(0);
            }
            if let Some(c) = b.as_const() {
                return E::bin(Add, a, &E::konst(c.wrapping_neg()));
            }
        }
        if op == Add {
            // Constants go right and fold into an existing `x + c`.
            if a.as_const().is_some() {
                return E::bin(Add, b, a);
            }
            if let (Expr::Bin(Add, x, c1), Some(c2)) = (a.expr(), b.as_const()) {
                if let Some(c1) = c1.as_const() {
                    return E::bin(Add, x, &E::konst(c1.wrapping_add(c2)));
                }
            }
        }
        mk(Expr::Bin(op, a.clone(), b.clone()))
    }

    pub fn cmp(op: CmpOp, a: &E, b: &E) -> E {
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            return E::konst(op.eval(x, y) as u64);
        }
        if a == b {
            return E::konst(matches!(op, CmpOp::Eq | CmpOp::Le) as u64);
        }
        match (op, b.as_const()) {
            (CmpOp::Lt, Some(0)) => return E::konst(0),
            (CmpOp::Le, Some(u64::MAX)) => return E::konst(1),
            _ => {}
        }
        mk(Expr::Cmp(op, a.clone(), b.clone()))
    }

    /// Boolean view: 1 if `self` is nonzero.
    pub fn truthy(&self) -> E {
        match self.expr() {
            Expr::Cmp(..) => self.clone(),
            _ => E::cmp(CmpOp::Ne, self, &E::konst(0)),
        }
    }

    /// Boolean negation of a truthy expression.
    pub fn not(&self) -> E {
        match self.expr() {
            Expr::Cmp(CmpOp::Eq, a, b) => E::cmp(CmpOp::Ne, a, b),
            Expr::Cmp(CmpOp::Ne, a, b) => E::cmp(CmpOp::Eq, a, b),
            Expr::Cmp(CmpOp::Lt, a, b) => E::cmp(CmpOp::Le, b, a),
            Expr::Cmp(CmpOp::Le, a, b) => E::cmp(CmpOp::Lt, b, a),
            _ => E::cmp(CmpOp::Eq, self, &E::konst(0)),
        }
    }

    pub fn extract(&self, i: u8) -> E {
        debug_assert!(i < 8);
        match self.expr() {
            Expr::Const(v) => E::konst((v >> (8 * i as u32)) & 0xff),
            Expr::Concat(v) => v.get(i as usize).cloned().unwrap_or_else(|| E::konst(0)),
            _ => mk(Expr::Extract(self.clone(), i)),
        }
    }

    /// Assembles `bytes` (little-endian) into one value.
    pub fn concat(bytes: Vec<E>) -> E {
        if bytes.len() == 1 {
            return bytes[0].clone();
        }
        if bytes.iter().all(|b| b.as_const().is_some()) {
            let v = bytes.iter().enumerate().fold(0u64, |acc, (i, b)| acc | (b.as_const().unwrap() << (8 * i)));
            return E::konst(v);
        }
        if bytes.len() == 8 {
            if let Expr::Extract(base, 0) = bytes[0].expr() {
                let whole = bytes.iter().enumerate().all(|(i, b)| matches!(b.expr(), Expr::Extract(x, j) if x == base && *j as usize == i));
                if whole {
                    return base.clone();
                }
            }
        }
        mk(Expr::Concat(bytes))
    }

    /// Value under `model`; symbols absent from it read as 0.
    pub fn eval(&self, model: &Model) -> u64 {
        let mut memo = HashMap::new();
        self.eval_memo(model, &mut memo)
    }

    fn eval_memo(&self, model: &Model, memo: &mut HashMap<*const Node, u64>) -> u64 {
        if self.0.syms.is_empty() {
            if let Expr::Const(v) = self.0.expr {
                return v;
            }
        }
        let key = Rc::as_ptr(&self.0);
        if let Some(v) = memo.get(&key) {
            return *v;
        }
        let v = match &self.0.expr {
            Expr::Const(v) => *v,
            Expr::Sym(s) => model.get(*s),
            Expr::Bin(op, a, b) => op.eval(a.eval_memo(model, memo), b.eval_memo(model, memo)),
            Expr::Cmp(op, a, b) => op.eval(a.eval_memo(model, memo), b.eval_memo(model, memo)) as u64,
            Expr::Extract(a, i) => (a.eval_memo(model, memo) >> (8 * *i as u32)) & 0xff,
            Expr::Concat(v) => {
                v.iter().enumerate().fold(0u64, |acc, (i, b)| acc | ((b.eval_memo(model, memo) & 0xff) << (8 * i)))
            }
        };
        memo.insert(key, v);
        v
    }

    /// S-expression text, with symbol names from `table`.
    pub fn render(&self, table: &SymTable) -> String {
        let mut s = String::new();
        self.render_into(table, &mut s);
        s
    }

    fn render_into(&self, t: &SymTable, out: &mut String) {
        if out.len() > 4096 {
            out.push('…');
            return;
        }
        match &self.0.expr {
            Expr::Const(v) => {
                let _ = write!(out, "{v:#x}");
            }
            Expr::Sym(s) => out.push_str(&t.name(*s)),
            Expr::Bin(op, a, b) => {
                let _ = write!(out, "({} ", op.mnemonic());
                a.render_into(t, out);
                out.push(' ');
                b.render_into(t, out);
                out.push(')');
            }
            Expr::Cmp(op, a, b) => {
                let _ = write!(out, "({} ", op.mnemonic());
                a.render_into(t, out);
                out.push(' ');
                b.render_into(t, out);
                out.push(')');
            }
            Expr::Extract(a, i) => {
                let _ = write!(out, "(byte{i} ");
                a.render_into(t, out);
                out.push(')');
            }
            Expr::Concat(v) => {
                out.push_str("(concat");
                for b in v {
                    out.push(' ');
                    b.render_into(t, out);
                }
                out.push(')');
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SymOrigin {
    /// Byte `index` of the symbolized region.
    Obj { index: usize },
    /// Content read through a symbolic address.
    Mem { k: usize },
    /// Return value of a skipped function.
    Skip { function: String },
}

#[derive(Debug, Clone)]
pub struct SymInfo {
    pub origin: SymOrigin,
    /// Width in bytes (1..=8).
    pub width: u8,
    /// Address expression for `Mem` symbols.
    pub addr: Option<E>,
}

/// Declarations of all symbols of one exploration.
#[derive(Debug, Clone, Default)]
pub struct SymTable {
    pub syms: Vec<SymInfo>,
}

impl SymTable {
    pub fn add(&mut self, origin: SymOrigin, width: u8, addr: Option<E>) -> SymId {
        self.syms.push(SymInfo { origin, width, addr });
        (self.syms.len() - 1) as SymId
    }

    pub fn info(&self, s: SymId) -> &SymInfo {
        &self.syms[s as usize]
    }

    pub fn width(&self, s: SymId) -> u8 {
        self.syms[s as usize].width
    }

    pub fn name(&self, s: SymId) -> String {
        match &self.syms[s as usize].origin {
            SymOrigin::Obj { index } => format!("obj[{index}]"),
            SymOrigin::Mem { k } => format!("mem_{k}"),
            SymOrigin::Skip { function } => format!("ret_{function}_{s}"),
        }
    }
}

/// Assignment of symbols to values; absent symbols read as 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Model {
    pub values: BTreeMap<SymId, u64>,
}

impl Model {
    pub fn get(&self, s: SymId) -> u64 {
        self.values.get(&s).copied().unwrap_or(0)
    }

    pub fn set(&mut self, s: SymId, v: u64) {
        self.values.insert(s, v);
    }
}
