//! Guest memory: bump-allocated heap with redzones, quarantine and a
//! per-redzone shadow buffer, plus optional spray regions used by replay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ir::Location;

pub const HEAP_BASE: u64 = 0x1000_0000;
pub const REDZONE: u64 = 16;
pub const HEAP_ALIGN: u64 = 16;
/// Requests above this size fail and return 0.
pub const MAX_ALLOC: u64 = 1 << 20;
/// Addresses below this are the unmapped null page.
pub const NULL_PAGE: u64 = 4096;
/// Arena in which replay may map sprayed payloads.
pub const SPRAY_ARENA: std::ops::Range<u64> = 0x6000_0000_0000..0x7000_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AllocId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocState {
    Live,
    Freed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub id: AllocId,
    pub base: u64,
    pub size: u64,
    pub state: AllocState,
    pub alloc_site: Location,
    pub free_site: Option<Location>,
    pub bytes: Vec<u8>,
    pub left_shadow: [Option<u8>; REDZONE as usize],
    pub right_shadow: [Option<u8>; REDZONE as usize],
}

impl Allocation {
    /// Start of the left redzone.
    pub fn lo(&self) -> u64 {
        self.base - REDZONE
    }

    /// One past the end of the right redzone.
    pub fn hi(&self) -> u64 {
        self.base + self.size + REDZONE
    }
}

/// Memory that replay maps at a fixed address.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SprayRegion {
    pub base: u64,
    pub bytes: Vec<u8>,
}

/// What a single guest byte address refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteClass {
    Null,
    Unmapped,
    Object { id: AllocId, offset: u64, freed: bool },
    /// `offset` is relative to the allocation base (negative on the left).
    Redzone { id: AllocId, offset: i64 },
    Spray { region: usize, offset: u64 },
}

/// Sanitizer verdict for a whole access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessCheck {
    Ok,
    Uaf { id: AllocId, offset: i64 },
    Oob { id: AllocId, offset: i64 },
    NullDeref,
    Gpf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreeCheck {
    Ok(AllocId),
    Null,
    Invalid { id: AllocId, offset: i64 },
    NullDeref,
    Wild,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heap {
    allocs: Vec<Allocation>,
    /// `lo()` of each allocation, for address lookup.
    by_lo: BTreeMap<u64, AllocId>,
    next: u64,
    pub spray: Vec<SprayRegion>,
    pub poison: u8,
}

impl Heap {
    pub fn new(poison: u8) -> Heap {
        Heap { allocs: Vec::new(), by_lo: BTreeMap::new(), next: HEAP_BASE, spray: Vec::new(), poison }
    }

    pub fn allocations(&self) -> &[Allocation] {
        &self.allocs
    }

    pub fn get(&self, id: AllocId) -> &Allocation {
        &self.allocs[id.0 as usize]
    }

    pub fn get_mut(&mut self, id: AllocId) -> &mut Allocation {
        &mut self.allocs[id.0 as usize]
    }

    /// Returns the base address, or `None` if the size is too large.
    pub fn alloc(&mut self, size: u64, site: Location) -> Option<(AllocId, u64)> {
        if size > MAX_ALLOC {
            return None;
        }
        let lo = self.next;
        let base = lo + REDZONE;
        let hi = base + size + REDZONE;
        self.next = hi.div_ceil(HEAP_ALIGN) * HEAP_ALIGN;
        let id = AllocId(self.allocs.len() as u32);
        self.allocs.push(Allocation {
            id,
            base,
            size,
            state: AllocState::Live,
            alloc_site: site,
            free_site: None,
            bytes: vec![0; size as usize],
            left_shadow: [None; REDZONE as usize],
            right_shadow: [None; REDZONE as usize],
        });
        self.by_lo.insert(lo, id);
        Some((id, base))
    }

    fn containing(&self, addr: u64) -> Option<&Allocation> {
        let (_, &id) = self.by_lo.range(..=addr).next_back()?;
        let a = self.get(id);
        (addr < a.hi()).then_some(a)
    }

    pub fn classify(&self, addr: u64) -> ByteClass {
        if addr < NULL_PAGE {
            return ByteClass::Null;
        }
        if let Some(a) = self.containing(addr) {
            let rel = addr as i64 - a.base as i64;
            return if rel >= 0 && (rel as u64) < a.size {
                ByteClass::Object { id: a.id, offset: rel as u64, freed: a.state == AllocState::Freed }
            } else {
                ByteClass::Redzone { id: a.id, offset: rel }
            };
        }
        for (i, r) in self.spray.iter().enumerate() {
            if addr >= r.base && addr - r.base < r.bytes.len() as u64 {
                return ByteClass::Spray { region: i, offset: addr - r.base };
            }
        }
        ByteClass::Unmapped
    }

    /// Classifies an access of `width` bytes at `addr`.
    ///
    /// Faults take precedence, then use-after-free, then out-of-bounds.
    /// The reported offset is that of the first byte relative to the
    /// allocation base.
    pub fn check(&self, addr: u64, width: u64) -> AccessCheck {
        if addr < NULL_PAGE {
            return AccessCheck::NullDeref;
        }
        let Some(end) = addr.checked_add(width) else {
            return AccessCheck::Gpf;
        };
        let mut uaf = None;
        let mut oob = None;
        for a in addr..end {
            match self.classify(a) {
                ByteClass::Null => return AccessCheck::NullDeref,
                ByteClass::Unmapped => return AccessCheck::Gpf,
                ByteClass::Object { id, freed: true, .. } => {
                    uaf.get_or_insert(id);
                }
                ByteClass::Redzone { id, .. } => {
                    oob.get_or_insert(id);
                }
                ByteClass::Object { .. } | ByteClass::Spray { .. } => {}
            }
        }
        let offset = |id: AllocId| addr as i64 - self.get(id).base as i64;
        match (uaf, oob) {
            (Some(id), _) => AccessCheck::Uaf { id, offset: offset(id) },
            (None, Some(id)) => AccessCheck::Oob { id, offset: offset(id) },
            (None, None) => AccessCheck::Ok,
        }
    }

    /// Reads one byte with sanitizer semantics: stale bytes for freed
    /// objects, shadow or poison in redzones. Unmapped bytes read as 0.
    pub fn read_byte(&self, addr: u64) -> u8 {
        match self.classify(addr) {
            ByteClass::Object { id, offset, .. } => self.get(id).bytes[offset as usize],
            ByteClass::Redzone { id, offset } => {
                let a = self.get(id);
                let v = if offset < 0 {
                    a.left_shadow[(offset + REDZONE as i64) as usize]
                } else {
                    a.right_shadow[(offset as u64 - a.size) as usize]
                };
                v.unwrap_or(self.poison)
            }
            ByteClass::Spray { region, offset } => self.spray[region].bytes[offset as usize],
            ByteClass::Null | ByteClass::Unmapped => 0,
        }
    }

    pub fn write_byte(&mut self, addr: u64, v: u8) {
        match self.classify(addr) {
            ByteClass::Object { id, offset, freed: false } => self.get_mut(id).bytes[offset as usize] = v,
            ByteClass::Object { freed: true, .. } => {}
            ByteClass::Redzone { id, offset } => {
                let a = self.get_mut(id);
                if offset < 0 {
                    a.left_shadow[(offset + REDZONE as i64) as usize] = Some(v);
                } else {
                    let i = (offset as u64 - a.size) as usize;
                    a.right_shadow[i] = Some(v);
                }
            }
            ByteClass::Spray { region, offset } => self.spray[region].bytes[offset as usize] = v,
            ByteClass::Null | ByteClass::Unmapped => {}
        }
    }

    /// Little-endian read of `width` bytes.
    pub fn read(&self, addr: u64, width: u64) -> u64 {
        (0..width).fold(0u64, |acc, i| acc | (self.read_byte(addr.wrapping_add(i)) as u64) << (8 * i))
    }

    pub fn write(&mut self, addr: u64, value: u64, width: u64) {
        for i in 0..width {
            self.write_byte(addr.wrapping_add(i), (value >> (8 * i)) as u8);
        }
    }

    pub fn check_free(&self, ptr: u64) -> FreeCheck {
        if ptr == 0 {
            return FreeCheck::Null;
        }
        if ptr < NULL_PAGE {
            return FreeCheck::NullDeref;
        }
        match self.containing(ptr) {
            Some(a) if ptr == a.base && a.state == AllocState::Live => FreeCheck::Ok(a.id),
            Some(a) => FreeCheck::Invalid { id: a.id, offset: ptr as i64 - a.base as i64 },
            None => FreeCheck::Wild,
        }
    }

    pub fn free(&mut self, id: AllocId, site: Location) {
        let a = self.get_mut(id);
        a.state = AllocState::Freed;
        a.free_site = Some(site);
    }

    /// Size in bytes of the region that is symbolized or refilled for `id`:
    /// the object alone, or the object plus both redzones.
    pub fn region_len(&self, id: AllocId, with_redzones: bool) -> u64 {
        self.get(id).size + if with_redzones { 2 * REDZONE } else { 0 }
    }

    /// Overwrites the object bytes (and optionally both redzone shadows)
    /// of `id` regardless of its state.
    pub fn refill(&mut self, id: AllocId, bytes: &[u8], with_redzones: bool) {
        let a = self.get_mut(id);
        if with_redzones {
            let rz = REDZONE as usize;
            let size = a.size as usize;
            for i in 0..rz {
                a.left_shadow[i] = Some(bytes[i]);
                a.right_shadow[i] = Some(bytes[rz + size + i]);
            }
            a.bytes.copy_from_slice(&bytes[rz..rz + size]);
        } else {
            a.bytes.copy_from_slice(bytes);
        }
    }

    /// Current contents of the region of `id` as seen by reads.
    pub fn region_bytes(&self, id: AllocId, with_redzones: bool) -> Vec<u8> {
        let a = self.get(id);
        let (lo, len) = if with_redzones { (a.lo(), a.size + 2 * REDZONE) } else { (a.base, a.size) };
        (0..len).map(|i| self.read_byte(lo + i)).collect()
    }
}
