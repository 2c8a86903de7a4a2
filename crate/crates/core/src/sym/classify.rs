//! Primitive classification of store, icall and free events.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::expr::SymId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PrimitiveKind {
    /// Use-after-free or out-of-bounds write into the vulnerable region.
    #[serde(rename = "UOW")]
    Uow,
    /// Arbitrary address write.
    #[serde(rename = "AAW")]
    Aaw,
    /// Constrained address write.
    #[serde(rename = "CAW")]
    Caw,
    /// Arbitrary value write.
    #[serde(rename = "AVW")]
    Avw,
    /// Constrained value write.
    #[serde(rename = "CVW")]
    Cvw,
    /// Function pointer dereference.
    #[serde(rename = "FPD")]
    Fpd,
    /// Invalid free.
    #[serde(rename = "IF")]
    If,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 7] = [
        PrimitiveKind::Uow,
        PrimitiveKind::Aaw,
        PrimitiveKind::Caw,
        PrimitiveKind::Avw,
        PrimitiveKind::Cvw,
        PrimitiveKind::Fpd,
        PrimitiveKind::If,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Uow => "UOW",
            PrimitiveKind::Aaw => "AAW",
            PrimitiveKind::Caw => "CAW",
            PrimitiveKind::Avw => "AVW",
            PrimitiveKind::Cvw => "CVW",
            PrimitiveKind::Fpd => "FPD",
            PrimitiveKind::If => "IF",
        }
    }

    /// The constrained counterpart of an arbitrary class.
    pub fn constrained(self) -> PrimitiveKind {
        match self {
            PrimitiveKind::Aaw => PrimitiveKind::Caw,
            PrimitiveKind::Avw => PrimitiveKind::Cvw,
            k => k,
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a concrete store lands relative to the symbolized region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionHit {
    Outside,
    /// Inside the region on bytes the sanitizer accepts.
    Live,
    /// Inside the region on freed or redzone bytes.
    Flagged,
}

/// Operand symbol sets of one event.
#[derive(Debug, Clone, Copy)]
pub enum Event<'a> {
    /// `region` is only meaningful for a concrete address.
    Store { addr: &'a BTreeSet<SymId>, value: &'a BTreeSet<SymId>, region: RegionHit },
    ICall { target: &'a BTreeSet<SymId> },
    Free { ptr: &'a BTreeSet<SymId>, into_freed_region: bool },
}

/// Primitives exhibited by `ev`, given the symbols mentioned by path
/// constraints (`constrained`). At most one address-class and one
/// value-class primitive per store.
pub fn classify_event(ev: &Event, constrained: &BTreeSet<SymId>) -> Vec<PrimitiveKind> {
    let arbitrary = |s: &BTreeSet<SymId>| s.is_disjoint(constrained);
    match *ev {
        Event::Store { addr, value, region } => {
            let mut out = Vec::new();
            if addr.is_empty() {
                match region {
                    RegionHit::Flagged => return vec![PrimitiveKind::Uow],
                    RegionHit::Live => return out,
                    RegionHit::Outside => {}
                }
            } else {
                out.push(if arbitrary(addr) { PrimitiveKind::Aaw } else { PrimitiveKind::Caw });
            }
            if !value.is_empty() {
                out.push(if arbitrary(value) { PrimitiveKind::Avw } else { PrimitiveKind::Cvw });
            }
            out
        }
        Event::ICall { target } if !target.is_empty() => vec![PrimitiveKind::Fpd],
        Event::ICall { .. } => Vec::new(),
        Event::Free { ptr, into_freed_region } if !ptr.is_empty() || into_freed_region => vec![PrimitiveKind::If],
        Event::Free { .. } => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    #[test]
    fn examples() {
        let none = set(&[]);
        let word = set(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let ev = Event::Store { addr: &word, value: &none, region: RegionHit::Outside };
        assert_eq!(classify_event(&ev, &set(&[40])), [PrimitiveKind::Aaw]);
        let val = set(&[8, 9]);
        let ev = Event::Store { addr: &none, value: &val, region: RegionHit::Outside };
        assert_eq!(classify_event(&ev, &set(&[8])), [PrimitiveKind::Cvw]);
        assert_eq!(classify_event(&Event::ICall { target: &set(&[50]) }, &set(&[50])), [PrimitiveKind::Fpd]);
        let ev = Event::Store { addr: &none, value: &val, region: RegionHit::Flagged };
        assert_eq!(classify_event(&ev, &none), [PrimitiveKind::Uow]);
        assert_eq!(classify_event(&Event::Free { ptr: &none, into_freed_region: true }, &none), [PrimitiveKind::If]);
        assert!(classify_event(&Event::Free { ptr: &none, into_freed_region: false }, &none).is_empty());
    }

    fn syms() -> impl Strategy<Value = BTreeSet<u32>> {
        proptest::collection::btree_set(0u32..12, 0..4)
    }

    fn region() -> impl Strategy<Value = RegionHit> {
        prop_oneof![Just(RegionHit::Outside), Just(RegionHit::Live), Just(RegionHit::Flagged)]
    }

    proptest! {
        #[test]
        fn store_classes_follow_symbol_sets(addr in syms(), value in syms(), c in syms(), r in region()) {
            let got = classify_event(&Event::Store { addr: &addr, value: &value, region: r }, &c);
            let mut want = Vec::new();
            if addr.is_empty() && r == RegionHit::Flagged {
                want.push(PrimitiveKind::Uow);
            } else if !(addr.is_empty() && r == RegionHit::Live) {
                if !addr.is_empty() {
                    want.push(if addr.iter().any(|s| c.contains(s)) { PrimitiveKind::Caw } else { PrimitiveKind::Aaw });
                }
                if !value.is_empty() {
                    want.push(if value.iter().any(|s| c.contains(s)) { PrimitiveKind::Cvw } else { PrimitiveKind::Avw });
                }
            }
            prop_assert_eq!(got, want);
        }

        #[test]
        fn result_depends_only_on_intersections(addr in syms(), value in syms(), c in syms(), extra in 100u32..200) {
            // Constraining a symbol no operand mentions changes nothing.
            let ev = Event::Store { addr: &addr, value: &value, region: RegionHit::Outside };
            let mut c2 = c.clone();
            c2.insert(extra);
            prop_assert_eq!(classify_event(&ev, &c), classify_event(&ev, &c2));
        }
    }
}
