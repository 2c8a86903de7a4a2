//! Concrete replay of findings.
//!
//! The finding's path constraints are re-solved with every symbolic read
//! address pinned to a disjoint slot of the spray arena, so that replay can
//! map the assumed contents there. The region bytes and spray regions are
//! then replayed from the snapshot and the resulting events are matched
//! against the finding.

use crate::exec::{replay_with_bytes, EventKind, ImpactKind, Snapshot, SPRAY_ARENA};
use crate::ir::{BinOp, CmpOp, Program, TestCase};

use super::classify::PrimitiveKind;
use super::explore::{finding_model, Pending};
use super::expr::{SymTable, E};
use super::solver::{check_sat, SatResult};
use super::FindingModel;

/// The replayed model if replay reproduces the finding.
pub(super) fn validate(
    p: &Program,
    tc: &TestCase,
    snap: &Snapshot,
    table: &SymTable,
    pending: &Pending,
) -> Option<FindingModel> {
    let mut cs = pending.constraints.clone();
    for m in &pending.mem {
        cs.push(E::cmp(CmpOp::Le, &E::konst(SPRAY_ARENA.start), &m.addr));
        cs.push(E::cmp(CmpOp::Le, &m.addr, &E::konst(SPRAY_ARENA.end - m.width as u64)));
    }
    for (i, a) in pending.mem.iter().enumerate() {
        for b in &pending.mem[i + 1..] {
            let a_end = E::bin(BinOp::Add, &a.addr, &E::konst(a.width as u64));
            let b_end = E::bin(BinOp::Add, &b.addr, &E::konst(b.width as u64));
            let apart =
                E::bin(BinOp::Or, &E::cmp(CmpOp::Le, &a_end, &b.addr), &E::cmp(CmpOp::Le, &b_end, &a.addr));
            cs.push(apart);
        }
    }
    let SatResult::Sat(model) = check_sat(&cs, table, &pending.model).ok()? else {
        return None;
    };
    let fm = finding_model(table, snap.region_len(), &pending.mem, pending.operand.as_ref(), &model);
    replays(p, tc, snap, pending.finding.primitive, &pending.finding.site, &fm).then_some(fm)
}

/// Whether replaying `model` produces an event of `kind`'s category at `site`.
pub fn replays(
    p: &Program,
    tc: &TestCase,
    snap: &Snapshot,
    kind: PrimitiveKind,
    site: &crate::ir::Location,
    model: &FindingModel,
) -> bool {
    let Ok(r) = replay_with_bytes(p, tc, snap, &model.object_bytes(), &model.spray()) else {
        return false;
    };
    let at_site = |k: &[ImpactKind]| r.impacts.iter().any(|i| &i.location == site && k.contains(&i.kind));
    let want = model.operand;
    let event = |f: &dyn Fn(&EventKind) -> bool| r.events.iter().any(|e| &e.location == site && f(&e.kind));
    match kind {
        PrimitiveKind::Uow => at_site(&[ImpactKind::UafWrite, ImpactKind::OobWrite]),
        PrimitiveKind::Aaw | PrimitiveKind::Caw => {
            event(&|k| matches!(k, EventKind::Store { addr, .. } if Some(*addr) == want))
        }
        PrimitiveKind::Avw | PrimitiveKind::Cvw => {
            event(&|k| matches!(k, EventKind::Store { value, width, .. } if Some(*value) == want.map(|v| v & mask(*width))))
        }
        PrimitiveKind::Fpd => event(&|k| matches!(k, EventKind::ICall { target } if Some(*target) == want)),
        PrimitiveKind::If => {
            at_site(&[ImpactKind::InvalidFree])
                || event(&|k| matches!(k, EventKind::Free { ptr } if Some(*ptr) == want))
        }
    }
}

fn mask(width: u8) -> u64 {
    if width >= 8 {
        u64::MAX
    } else {
        (1u64 << (8 * width as u32)) - 1
    }
}
