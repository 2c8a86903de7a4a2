//! Static estimation of hidden impacts reachable from a vulnerable read.
//!
//! [`locate_vuln_point`] maps a sanitizer report to the flagged load.
//! [`estimate_hidden_impacts`] then runs an interprocedural taint analysis
//! from that load: the loaded value and every later load through a pointer
//! into the vulnerable object are sources, and stores, indirect calls and
//! frees are sinks. For each sink a shortest control-flow trace from the
//! anchor is recorded together with the branch directions it takes; the
//! symbolic stage uses those traces as [`Guidance`].

mod flow;
mod trace;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{Impact, ImpactKind};
use crate::ir::{Inst, Location, Program, Site};

pub use trace::{distance, UNREACHABLE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnObject {
    pub alloc_site: Location,
    pub size: u64,
    /// Offset of the flagged access from the object base.
    pub offset: i64,
}

/// The flagged load and the object it reads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnAnchor {
    pub function: String,
    pub instruction: Location,
    pub object: VulnObject,
    /// Innermost first, starting with `instruction`.
    pub call_trace: Vec<Location>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PotentialKind {
    Fpd,
    WriteAddr,
    WriteValue,
    WriteToObject,
    FreeTainted,
}

impl fmt::Display for PotentialKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PotentialKind::Fpd => "FPD",
            PotentialKind::WriteAddr => "WRITE_ADDR",
            PotentialKind::WriteValue => "WRITE_VALUE",
            PotentialKind::WriteToObject => "WRITE_TO_OBJECT",
            PotentialKind::FreeTainted => "FREE_TAINTED",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PotentialImpact {
    pub kind: PotentialKind,
    pub sink: Location,
    /// Blocks crossed on the trace from the anchor; [`UNREACHABLE`] if none exists.
    pub distance: u64,
    pub trace_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Taken,
    NotTaken,
}

impl Direction {
    pub fn of(taken: bool) -> Direction {
        if taken {
            Direction::Taken
        } else {
            Direction::NotTaken
        }
    }

    pub fn is_taken(self) -> bool {
        self == Direction::Taken
    }
}

/// One required branch direction on a trace.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BranchReq {
    /// Innermost call sites of the frame executing the branch (at most the
    /// configured call-string depth).
    pub context: Vec<Location>,
    pub branch: Location,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub id: usize,
    pub sink: Location,
    pub kinds: Vec<PotentialKind>,
    pub distance: u64,
    /// Lowest frame depth on the trace, relative to the anchor frame
    /// (0 = never returns out of the anchor function, -1 = returns once, ...).
    pub scope_depth: i64,
    pub branches: Vec<BranchReq>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guidance {
    pub traces: Vec<Trace>,
    /// Sink of the longest trace.
    pub farthest: Option<Location>,
}

impl Guidance {
    pub fn trace(&self, id: usize) -> Option<&Trace> {
        self.traces.iter().find(|t| t.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaintLimits {
    pub call_string_depth: usize,
    /// Iterations per loop on recorded traces. Shortest traces never repeat
    /// a block, so any value of at least 1 is met.
    pub loop_unroll: usize,
    /// Instruction transfers before the analysis gives up.
    pub max_steps: u64,
}

impl Default for TaintLimits {
    fn default() -> Self {
        TaintLimits { call_string_depth: 3, loop_unroll: 2, max_steps: 2_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Estimate {
    pub anchor: VulnAnchor,
    pub impacts: Vec<PotentialImpact>,
    pub guidance: Guidance,
    /// The step budget ran out; `impacts` may be missing entries.
    pub incomplete: bool,
}

impl Estimate {
    /// Distinct sink locations.
    pub fn sinks(&self) -> std::collections::BTreeSet<Location> {
        self.impacts.iter().map(|i| i.sink.clone()).collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaintError {
    #[error("impact {0} is not a use-after-free or out-of-bounds read")]
    NotVulnRead(&'static str),
    #[error("report has no vulnerable allocation")]
    NoObject,
    #[error("no load instruction at {0}")]
    AnchorNotFound(Location),
}

pub fn locate_vuln_point(p: &Program, report: &Impact) -> Result<VulnAnchor, TaintError> {
    if !matches!(report.kind, ImpactKind::UafRead | ImpactKind::OobRead) {
        return Err(TaintError::NotVulnRead(report.kind.name()));
    }
    let (Some(alloc_site), Some(offset)) = (&report.alloc_site, report.offset) else {
        return Err(TaintError::NoObject);
    };
    let loc = &report.location;
    match p.site(loc) {
        Some(Site::Inst(Inst::Load { .. })) => {}
        _ => return Err(TaintError::AnchorNotFound(loc.clone())),
    }
    let mut call_trace = report.call_trace.clone();
    if call_trace.first() != Some(loc) {
        call_trace.insert(0, loc.clone());
    }
    Ok(VulnAnchor {
        function: loc.function.clone(),
        instruction: loc.clone(),
        object: VulnObject { alloc_site: alloc_site.clone(), size: report.alloc_size.unwrap_or(0), offset },
        call_trace,
    })
}

pub fn estimate_hidden_impacts(p: &Program, a: &VulnAnchor, limits: &TaintLimits) -> Estimate {
    let found = flow::analyze(p, a, limits);
    let sinks: Vec<(PotentialKind, Location)> = found.sinks.into_iter().collect();
    let locs: Vec<Location> = {
        let mut v: Vec<Location> = sinks.iter().map(|(_, l)| l.clone()).collect();
        v.dedup();
        v.sort();
        v.dedup();
        v
    };
    let paths = trace::shortest_traces(p, a, &locs, limits.call_string_depth);
    let mut order: Vec<(u64, Location)> =
        locs.iter().map(|l| (paths.get(l).map_or(UNREACHABLE, |t| t.distance), l.clone())).collect();
    order.sort();
    let mut traces = Vec::new();
    let mut impacts = Vec::new();
    for (id, (dist, loc)) in order.iter().enumerate() {
        let kinds: Vec<PotentialKind> = sinks.iter().filter(|(_, l)| l == loc).map(|(k, _)| *k).collect();
        for k in &kinds {
            impacts.push(PotentialImpact { kind: *k, sink: loc.clone(), distance: *dist, trace_id: id });
        }
        let (scope_depth, branches) = match paths.get(loc) {
            Some(t) => (t.scope_depth, t.branches.clone()),
            None => (0, Vec::new()),
        };
        traces.push(Trace { id, sink: loc.clone(), kinds, distance: *dist, scope_depth, branches });
    }
    let farthest = traces.iter().filter(|t| t.distance != UNREACHABLE).max_by_key(|t| t.distance).map(|t| t.sink.clone());
    Estimate { anchor: a.clone(), impacts, guidance: Guidance { traces, farthest }, incomplete: found.incomplete }
}

#[cfg(test)]
mod tests;
