//! Snapshot-based symbolic execution with impact classification.
//!
//! [`explore`] starts from a [`Snapshot`] frozen at a vulnerable read,
//! replaces every byte of the vulnerable region with a symbol `obj[i]`, and
//! explores paths over a FIFO worklist. Loads through symbolic addresses
//! yield fresh symbols `mem_k` (an attacker-sprayed payload). Stores,
//! indirect calls and frees whose operands are symbolic are classified into
//! [`PrimitiveKind`]s, and each [`Finding`] is validated by replaying its
//! model concretely.
//!
//! Guidance from the taint stage is applied per trace: sinks within the
//! threshold are found by one free run, each farther sink by one run that
//! follows only the trace's required branch directions.

mod classify;
mod explore;
pub mod expr;
pub mod solver;
mod validate;

pub use validate::replays;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::exec::{Snapshot, SprayRegion};
use crate::ir::{Location, Program, TestCase};
use crate::taint::{Direction, Guidance};

pub use classify::{classify_event, Event, PrimitiveKind, RegionHit};
pub use explore::{SymFrame, SymState};
pub use expr::{Expr, Model, SymId, SymOrigin, SymTable, E};
pub use solver::{check_sat, Constraint, ConstraintStore, SatResult, SolverError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreConfig {
    /// States one run may create before it stops.
    pub state_budget: u64,
    /// Instructions one state may execute.
    pub step_budget: u64,
    /// Traces longer than this (in blocks) get their own pruned run.
    pub threshold_blocks: u64,
    /// Forks allowed at one branch location along a state's lineage.
    pub fork_cap: u32,
    /// Call-site depth used to match guided branches.
    pub call_string_depth: usize,
    /// Require an arbitrary operand to reach both a low and a high address.
    pub range_probe: bool,
    pub validate: bool,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            state_budget: 10_000,
            step_budget: 100_000,
            threshold_blocks: 40,
            fork_cap: 2,
            call_string_depth: 3,
            range_probe: false,
            validate: true,
        }
    }
}

/// Content assumed at a symbolic address.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemAssignment {
    pub name: String,
    pub addr: u64,
    pub width: u8,
    pub value: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindingModel {
    /// Hex bytes of the vulnerable region (object plus redzones for
    /// out-of-bounds objects).
    pub object: String,
    pub mem: Vec<MemAssignment>,
    /// Concrete address, value or target of the classified operand.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub operand: Option<u64>,
}

impl FindingModel {
    pub fn object_bytes(&self) -> Vec<u8> {
        (0..self.object.len() / 2).map(|i| u8::from_str_radix(&self.object[2 * i..2 * i + 2], 16).unwrap_or(0)).collect()
    }

    /// Spray regions that place every `mem` assignment at its address.
    pub fn spray(&self) -> Vec<SprayRegion> {
        self.mem
            .iter()
            .map(|m| SprayRegion { base: m.addr, bytes: m.value.to_le_bytes()[..m.width as usize].to_vec() })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub primitive: PrimitiveKind,
    pub site: Location,
    pub context_id: usize,
    pub constraints: Vec<String>,
    pub model: FindingModel,
    pub validated: bool,
    /// States created by the run when the finding was emitted.
    pub state_count: u64,
    /// Trace whose pruned run emitted it; `None` for free runs.
    pub trace_id: Option<usize>,
}

/// How one exploration run is steered.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunPlan {
    pub trace_id: Option<usize>,
    /// Required direction per (call-site context, branch).
    pub required: BTreeMap<(Vec<Location>, Location), Direction>,
    /// States end right after executing this instruction.
    pub stop_after: Option<Location>,
    /// States end when returning below this depth relative to the snapshot
    /// frame; `None` runs to the end of the syscall.
    pub scope_depth: Option<i64>,
}

/// Runs for `g`: one free run over the sinks within the threshold (ending
/// at the farthest of them) and one pruned run per farther trace. Without
/// guidance, or with no reachable sink, a single free run to the end of the
/// syscall.
pub fn plan_runs(g: Option<&Guidance>, threshold: u64) -> Vec<RunPlan> {
    let reachable: Vec<_> =
        g.map(|g| g.traces.iter().filter(|t| t.distance != crate::taint::UNREACHABLE).collect()).unwrap_or_default();
    if reachable.is_empty() {
        return vec![RunPlan::default()];
    }
    let mut runs = Vec::new();
    let near: Vec<_> = reachable.iter().filter(|t| t.distance <= threshold).collect();
    if let Some(far) = near.iter().max_by_key(|t| (t.distance, t.id)) {
        runs.push(RunPlan {
            trace_id: None,
            required: BTreeMap::new(),
            stop_after: Some(far.sink.clone()),
            scope_depth: near.iter().map(|t| t.scope_depth).min(),
        });
    }
    for t in reachable.iter().filter(|t| t.distance > threshold) {
        let required = t.branches.iter().map(|b| ((b.context.clone(), b.branch.clone()), b.direction)).collect();
        runs.push(RunPlan {
            trace_id: Some(t.id),
            required,
            stop_after: Some(t.sink.clone()),
            scope_depth: Some(t.scope_depth),
        });
    }
    runs
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub trace_id: Option<usize>,
    pub states: u64,
    pub steps: u64,
    pub incomplete: bool,
    /// States killed by the fork cap.
    pub fork_cap_kills: u64,
    /// Solver checks that exceeded the encoding budget.
    pub fragment_exceeded: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exploration {
    pub findings: Vec<Finding>,
    pub runs: Vec<RunStats>,
    pub incomplete: bool,
}

impl Exploration {
    pub fn states(&self) -> u64 {
        self.runs.iter().map(|r| r.states).sum()
    }

    pub fn steps(&self) -> u64 {
        self.runs.iter().map(|r| r.steps).sum()
    }

    pub fn has(&self, kind: PrimitiveKind, site: &Location) -> bool {
        self.findings.iter().any(|f| f.primitive == kind && &f.site == site)
    }
}

/// Explores `snap` under the runs planned from `guidance` and merges their
/// findings. Per (site, primitive) the first validated finding is kept, or
/// the first one if none validated.
pub fn explore(
    p: &Program,
    tc: &TestCase,
    snap: &Snapshot,
    guidance: Option<&Guidance>,
    cfg: &ExploreConfig,
    context_id: usize,
) -> Exploration {
    let mut out = Exploration::default();
    let mut best: BTreeMap<(Location, PrimitiveKind), Finding> = BTreeMap::new();
    for plan in plan_runs(guidance, cfg.threshold_blocks) {
        let r = explore_run(p, tc, snap, &plan, cfg, context_id);
        out.incomplete |= r.incomplete;
        out.runs.extend(r.runs);
        for f in r.findings {
            let key = (f.site.clone(), f.primitive);
            match best.get(&key) {
                Some(old) if old.validated || !f.validated => {}
                _ => {
                    best.insert(key, f);
                }
            }
        }
    }
    out.findings = best.into_values().collect();
    out
}

/// A single run under `plan`.
pub fn explore_run(
    p: &Program,
    tc: &TestCase,
    snap: &Snapshot,
    plan: &RunPlan,
    cfg: &ExploreConfig,
    context_id: usize,
) -> Exploration {
    let mut engine = explore::Engine::new(p, snap, plan, cfg);
    engine.run();
    let stats = engine.stats();
    let mut findings = Vec::new();
    for pending in &engine.pending {
        let mut f = pending.finding.clone();
        f.context_id = context_id;
        if cfg.validate {
            if let Some(model) = validate::validate(p, tc, snap, &engine.table, pending) {
                f.model = model;
                f.validated = true;
            }
        }
        findings.push(f);
    }
    Exploration { findings, incomplete: stats.incomplete, runs: vec![stats] }
}
