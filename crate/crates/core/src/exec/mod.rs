//! Deterministic concrete interpreter with a KASAN-style sanitizer.
//!
//! [`execute`] runs a [`TestCase`] against a [`Program`] and records every
//! sanitizer or fault event as an [`Impact`]. In multi-shot mode recoverable
//! impacts are recorded and execution continues; otherwise execution halts
//! at the first impact. [`snapshot_at_first_vuln_read`] freezes the machine
//! right before a flagged read so that it can be resumed, possibly with the
//! vulnerable object's bytes replaced ([`replay_with_bytes`]).

mod heap;
mod machine;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{Location, Program, TestCase};

pub use heap::{
    AccessCheck, AllocId, AllocState, Allocation, ByteClass, FreeCheck, Heap, SprayRegion, HEAP_ALIGN, HEAP_BASE,
    MAX_ALLOC, NULL_PAGE, REDZONE, SPRAY_ARENA,
};
pub use machine::{Frame, MachineState};

/// Maximum call depth; deeper calls report BUG and are skipped.
pub const MAX_CALL_DEPTH: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecConfig {
    pub multi_shot: bool,
    pub step_budget: u64,
    pub poison: u8,
    /// Treat `assertfail BUG` as a stop even in multi-shot mode.
    pub bug_is_fatal: bool,
    /// Record a [`SiteEvent`] before every store, icall and free.
    pub record_events: bool,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig { multi_shot: false, step_budget: 1_000_000, poison: 0xAA, bug_is_fatal: false, record_events: false }
    }
}

impl ExecConfig {
    pub fn multi_shot() -> Self {
        ExecConfig { multi_shot: true, ..ExecConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ImpactKind {
    OobRead,
    OobWrite,
    UafRead,
    UafWrite,
    InvalidFree,
    Gpf,
    NullDeref,
    DivZero,
    Warn,
    Bug,
}

impl ImpactKind {
    /// Kills the run regardless of multi-shot.
    pub fn is_irrecoverable(self) -> bool {
        matches!(self, ImpactKind::Gpf | ImpactKind::NullDeref)
    }

    pub fn is_memory(self) -> bool {
        matches!(
            self,
            ImpactKind::OobRead | ImpactKind::OobWrite | ImpactKind::UafRead | ImpactKind::UafWrite | ImpactKind::InvalidFree
        )
    }

    pub fn is_vuln_read(self) -> bool {
        matches!(self, ImpactKind::OobRead | ImpactKind::UafRead)
    }

    /// Concrete impacts that are high-risk on their own.
    pub fn is_high_risk(self) -> bool {
        matches!(self, ImpactKind::OobWrite | ImpactKind::UafWrite | ImpactKind::InvalidFree)
    }

    pub fn name(self) -> &'static str {
        match self {
            ImpactKind::OobRead => "OOB_READ",
            ImpactKind::OobWrite => "OOB_WRITE",
            ImpactKind::UafRead => "UAF_READ",
            ImpactKind::UafWrite => "UAF_WRITE",
            ImpactKind::InvalidFree => "INVALID_FREE",
            ImpactKind::Gpf => "GPF",
            ImpactKind::NullDeref => "NULL_DEREF",
            ImpactKind::DivZero => "DIV_ZERO",
            ImpactKind::Warn => "WARN",
            ImpactKind::Bug => "BUG",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Read,
    Write,
    Free,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Access {
    pub kind: AccessKind,
    pub width: u8,
}

/// One sanitizer or fault event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Impact {
    pub kind: ImpactKind,
    pub access: Access,
    pub location: Location,
    /// Innermost first: the impact location, then each caller's call site.
    pub call_trace: Vec<Location>,
    pub vuln_alloc: Option<AllocId>,
    pub alloc_site: Option<Location>,
    /// Size in bytes of the vulnerable allocation.
    pub alloc_size: Option<u64>,
    pub offset: Option<i64>,
    /// Faulting guest address, when there is one.
    pub address: Option<u64>,
    /// Execution-order index among impacts.
    pub seq: u64,
    /// Step count at which the impact fired.
    pub step: u64,
    /// Index of the syscall in the test case.
    pub call_index: usize,
}

impl Impact {
    /// Function names of the innermost `n` frames.
    pub fn frames(&self, n: usize) -> Vec<String> {
        self.call_trace.iter().take(n).map(|l| l.function.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub func: u32,
    pub from: u32,
    pub to: u32,
}

/// Marker block index used for function-entry coverage.
pub const ENTRY_EDGE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    KilledIrrecoverable,
    BudgetExhausted,
    /// Stopped at the first recoverable impact (multi-shot off).
    Halted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Store { addr: u64, value: u64, width: u8 },
    ICall { target: u64 },
    Free { ptr: u64 },
}

/// A store, icall or free observed before it executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteEvent {
    pub location: Location,
    pub kind: EventKind,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResult {
    pub impacts: Vec<Impact>,
    pub coverage: BTreeSet<Edge>,
    pub steps: u64,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub events: Vec<SiteEvent>,
}

/// Which flagged read to freeze at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    FirstFlagged,
    /// First flagged read of an object allocated at this site.
    AllocSite(Location),
    /// The flagged read that produces the impact with this sequence number.
    Seq(u64),
}

impl Selector {
    fn matches(&self, seq: u64, alloc_site: &Location) -> bool {
        match self {
            Selector::FirstFlagged => true,
            Selector::AllocSite(l) => l == alloc_site,
            Selector::Seq(s) => *s == seq,
        }
    }
}

/// Machine state frozen just before a flagged read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub state: MachineState,
    pub vuln_alloc: AllocId,
    pub trigger: Impact,
    pub config: ExecConfig,
}

impl Snapshot {
    /// Out-of-bounds objects are refilled together with both redzones.
    pub fn includes_redzones(&self) -> bool {
        matches!(self.trigger.kind, ImpactKind::OobRead | ImpactKind::OobWrite)
    }

    pub fn region_len(&self) -> usize {
        self.state.heap.region_len(self.vuln_alloc, self.includes_redzones()) as usize
    }

    /// Address of the first byte of the refillable region.
    pub fn region_start(&self) -> u64 {
        let a = self.state.heap.get(self.vuln_alloc);
        if self.includes_redzones() {
            a.lo()
        } else {
            a.base
        }
    }

    /// The region bytes at freeze time, as reads would observe them.
    pub fn region_bytes(&self) -> Vec<u8> {
        self.state.heap.region_bytes(self.vuln_alloc, self.includes_redzones())
    }

    pub fn allocation(&self) -> &Allocation {
        self.state.heap.get(self.vuln_alloc)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SnapshotError {
    #[error("no flagged use-after-free or out-of-bounds read matched")]
    NoVulnRead,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("object bytes have length {got}, the region has {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("spray region at {0:#x} overlaps mapped memory or another region")]
    BadSpray(u64),
}

/// Runs `tc` from a fresh machine.
pub fn execute(p: &Program, tc: &TestCase, cfg: &ExecConfig) -> ExecResult {
    let mut m = machine::Run::new(p, tc, cfg, MachineState::new(cfg.poison), None);
    m.run();
    m.finish()
}

pub fn snapshot_at_first_vuln_read(
    p: &Program,
    tc: &TestCase,
    cfg: &ExecConfig,
    selector: &Selector,
) -> Result<Snapshot, SnapshotError> {
    let mut m = machine::Run::new(p, tc, cfg, MachineState::new(cfg.poison), Some(selector));
    m.run();
    m.snapshot.take().ok_or(SnapshotError::NoVulnRead)
}

/// Continues a snapshot unchanged. The result holds only the suffix.
pub fn resume(p: &Program, tc: &TestCase, snap: &Snapshot) -> ExecResult {
    resume_with(p, tc, snap, &snap.config, snap.state.clone())
}

fn resume_with(p: &Program, tc: &TestCase, snap: &Snapshot, cfg: &ExecConfig, state: MachineState) -> ExecResult {
    let start = state.steps;
    let mut m = machine::Run::new(p, tc, cfg, state, None);
    m.run();
    let mut r = m.finish();
    debug_assert!(r.impacts.iter().all(|i| i.seq >= snap.trigger.seq));
    r.steps -= start;
    r
}

/// Resumes `snap` after overwriting the vulnerable region with `bytes` and
/// mapping `spray` regions. Events are recorded.
pub fn replay_with_bytes(
    p: &Program,
    tc: &TestCase,
    snap: &Snapshot,
    bytes: &[u8],
    spray: &[SprayRegion],
) -> Result<ExecResult, ReplayError> {
    let want = snap.region_len();
    if bytes.len() != want {
        return Err(ReplayError::LengthMismatch { got: bytes.len(), want });
    }
    let mut state = snap.state.clone();
    state.heap.refill(snap.vuln_alloc, bytes, snap.includes_redzones());
    for r in spray {
        let end = r.base.checked_add(r.bytes.len() as u64).ok_or(ReplayError::BadSpray(r.base))?;
        let clear = (r.base..end).all(|a| state.heap.classify(a) == ByteClass::Unmapped);
        if !clear || r.base < NULL_PAGE {
            return Err(ReplayError::BadSpray(r.base));
        }
        state.heap.spray.push(r.clone());
    }
    let cfg = ExecConfig { record_events: true, ..snap.config.clone() };
    Ok(resume_with(p, tc, snap, &cfg, state))
}
