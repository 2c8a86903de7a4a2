//! Shortest anchor-to-sink traces and their branch requirements.
//!
//! The search runs over instruction positions of an interprocedural graph.
//! Crossing a block edge costs 1; entering or stepping over a call costs 0.
//! Returning from the anchor's function (or one of its callers) resumes the
//! next frame of the report's call trace, so the cost of a trace is the sum of
//! the per-function block distances along its call chain.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};

use crate::ir::{FuncId, Inst, Location, Program, Terminator};

use super::{BranchReq, Direction, VulnAnchor};

/// Distance of a sink no trace reaches.
pub const UNREACHABLE: u64 = u64::MAX;

/// Deepest callee nesting explored below a trace frame.
const MAX_NEST: usize = 16;

/// Intraprocedural shortest path, in block edges, between the blocks of two
/// locations of the same function. `None` if unreachable or in different
/// functions.
pub fn distance(p: &Program, from: &Location, to: &Location) -> Option<u64> {
    if from.function != to.function {
        return None;
    }
    let f = p.function(&from.function)?;
    let mut dist = vec![None; f.blocks.len()];
    dist[from.block] = Some(0u64);
    let mut q = VecDeque::from([from.block]);
    while let Some(b) = q.pop_front() {
        let d = dist[b].unwrap();
        for s in f.blocks[b].term.successors() {
            if dist[s].is_none() {
                dist[s] = Some(d + 1);
                q.push_back(s);
            }
        }
    }
    dist.get(to.block).copied().flatten()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Node {
    level: usize,
    /// Call sites entered below the trace frame, innermost first.
    nest: Vec<Location>,
    func: FuncId,
    block: usize,
    index: usize,
}

pub(super) struct Path {
    pub distance: u64,
    pub scope_depth: i64,
    pub branches: Vec<BranchReq>,
}

struct Search<'a> {
    p: &'a Program,
    a: &'a VulnAnchor,
    depth: usize,
    address_taken: Vec<FuncId>,
    nodes: Vec<Node>,
    ids: HashMap<Node, usize>,
    dist: Vec<u64>,
    /// Predecessor and, for branch edges, the requirement it implies.
    pred: Vec<Option<(usize, Option<BranchReq>)>>,
}

impl<'a> Search<'a> {
    fn id(&mut self, n: Node) -> usize {
        if let Some(&i) = self.ids.get(&n) {
            return i;
        }
        self.nodes.push(n.clone());
        self.ids.insert(n, self.nodes.len() - 1);
        self.dist.push(UNREACHABLE);
        self.pred.push(None);
        self.nodes.len() - 1
    }

    fn context(&self, n: &Node) -> Vec<Location> {
        n.nest.iter().chain(self.a.call_trace[n.level + 1..].iter()).take(self.depth).cloned().collect()
    }

    fn edges(&self, n: &Node) -> Vec<(Node, u64, Option<BranchReq>)> {
        let f = self.p.func(n.func);
        let b = &f.blocks[n.block];
        let mut out = Vec::new();
        if n.index < b.insts.len() {
            let next = Node { index: n.index + 1, ..n.clone() };
            let callees: Vec<FuncId> = match &b.insts[n.index] {
                Inst::Call { func, .. } => vec![*func],
                Inst::ICall { .. } => self.address_taken.clone(),
                _ => Vec::new(),
            };
            if n.nest.len() < MAX_NEST {
                let site = Location::new(f.name.clone(), n.block, n.index);
                for c in callees {
                    let mut nest = vec![site.clone()];
                    nest.extend(n.nest.iter().cloned());
                    out.push((Node { level: n.level, nest, func: c, block: 0, index: 0 }, 0, None));
                }
            }
            out.push((next, 0, None));
            return out;
        }
        match b.term {
            Terminator::Br(t) => out.push((Node { block: t, index: 0, ..n.clone() }, 1, None)),
            Terminator::CondBr { then_to, else_to, .. } => {
                let branch = Location::new(f.name.clone(), n.block, n.index);
                for (to, taken) in [(then_to, true), (else_to, false)] {
                    let req = (then_to != else_to).then(|| BranchReq {
                        context: self.context(n),
                        branch: branch.clone(),
                        direction: Direction::of(taken),
                    });
                    out.push((Node { block: to, index: 0, ..n.clone() }, 1, req));
                }
            }
            Terminator::Ret(_) => {
                // Inside a nested callee the search already stepped over the call.
                if n.nest.is_empty() && n.level + 1 < self.a.call_trace.len() {
                    let site = &self.a.call_trace[n.level + 1];
                    if let Some(cf) = self.p.func_id(&site.function) {
                        out.push((
                            Node { level: n.level + 1, nest: Vec::new(), func: cf, block: site.block, index: site.index + 1 },
                            0,
                            None,
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Shortest trace from the anchor to each of `sinks`.
pub(super) fn shortest_traces(p: &Program, a: &VulnAnchor, sinks: &[Location], depth: usize) -> BTreeMap<Location, Path> {
    let mut address_taken: Vec<FuncId> = p
        .functions
        .iter()
        .flat_map(|f| f.blocks.iter().flat_map(|b| b.insts.iter()))
        .filter_map(|i| if let Inst::FnAddr { func, .. } = i { Some(*func) } else { None })
        .collect();
    address_taken.sort();
    address_taken.dedup();
    let mut s = Search {
        p,
        a,
        depth,
        address_taken,
        nodes: Vec::new(),
        ids: HashMap::new(),
        dist: Vec::new(),
        pred: Vec::new(),
    };
    let mut found: BTreeMap<Location, usize> = BTreeMap::new();
    let Some(af) = p.func_id(&a.instruction.function) else {
        return BTreeMap::new();
    };
    let start =
        s.id(Node { level: 0, nest: Vec::new(), func: af, block: a.instruction.block, index: a.instruction.index + 1 });
    s.dist[start] = 0;
    let mut heap = BinaryHeap::from([Reverse((0u64, start))]);
    while let Some(Reverse((d, u))) = heap.pop() {
        if d > s.dist[u] {
            continue;
        }
        let n = s.nodes[u].clone();
        let here = Location::new(p.func(n.func).name.clone(), n.block, n.index);
        if sinks.contains(&here) && !found.contains_key(&here) {
            found.insert(here, u);
            if found.len() == sinks.len() {
                break;
            }
        }
        for (m, w, req) in s.edges(&n) {
            let v = s.id(m);
            if d + w < s.dist[v] {
                s.dist[v] = d + w;
                s.pred[v] = Some((u, req));
                heap.push(Reverse((d + w, v)));
            }
        }
    }
    found
        .into_iter()
        .map(|(loc, end)| {
            let mut reqs = Vec::new();
            let mut scope = 0i64;
            let mut cur = end;
            loop {
                let n = &s.nodes[cur];
                scope = scope.min(n.nest.len() as i64 - n.level as i64);
                match &s.pred[cur] {
                    Some((prev, req)) => {
                        if let Some(r) = req {
                            reqs.push(r.clone());
                        }
                        cur = *prev;
                    }
                    None => break,
                }
            }
            reqs.reverse();
            (loc, Path { distance: s.dist[end], scope_depth: scope, branches: consistent(reqs) })
        })
        .collect()
}

/// Drops branches required in both directions and repeated requirements.
fn consistent(reqs: Vec<BranchReq>) -> Vec<BranchReq> {
    let mut out: Vec<BranchReq> = Vec::new();
    for r in &reqs {
        let clash = reqs.iter().any(|o| o.context == r.context && o.branch == r.branch && o.direction != r.direction);
        if !clash && !out.contains(r) {
            out.push(r.clone());
        }
    }
    out
}
