// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! The confined data region a program executes in, its address masks and
//! the trusted metadata kept beside it.
//!
//! Addresses are virtual: the region lives at `base` in the VM's flat
//! address space and is backed by a host buffer. Everything in
//! [`SandboxMetadata`] is plain host state with no virtual address, so no
//! masked address can name it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default region size: one page.
pub const DEFAULT_SIZE: u64 = 4096;
pub const MIN_SIZE: u64 = 64;
pub const MAX_SIZE: u64 = 1 << 32;
/// Guard bytes so that a masked address at the top of the region plus an
/// 8-byte access stays in owned memory.
pub const RED_ZONE: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SandboxError {
    #[error("sandbox size {0:#x} must be a power of two in [{MIN_SIZE}, {MAX_SIZE:#x}]")]
    BadSize(u64),
    #[error("base {base:#x} is not aligned to size {size:#x}")]
    BadAlignment { base: u64, size: u64 },
    #[error("layout proportions are invalid: {0}")]
    BadLayout(String),
    #[error("could not allocate {0} bytes for the sandbox region")]
    AllocationFailure(u64),
    #[error("heap exhausted: requested {requested} bytes, {available} available")]
    HeapExhausted { requested: u64, available: u64 },
    #[error("zero-length heap allocation")]
    EmptyAllocation,
}

/// The and/or pair applied to every access address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressMasks {
    pub and_mask: u64,
    pub or_mask: u64,
}

impl AddressMasks {
    #[inline]
    pub fn apply(&self, address: u64) -> u64 {
        (address & self.and_mask) | self.or_mask
    }
}

pub fn compute_masks(base: u64, size: u64) -> Result<AddressMasks, SandboxError> {
    if !size.is_power_of_two() || !(MIN_SIZE..=MAX_SIZE).contains(&size) {
        return Err(SandboxError::BadSize(size));
    }
    if base & (size - 1) != 0 {
        return Err(SandboxError::BadAlignment { base, size });
    }
    Ok(AddressMasks { and_mask: size - 1, or_mask: base })
}

/// Confine `address` to the region described by `masks`. Never fails.
#[inline]
pub fn mask_address(masks: &AddressMasks, address: u64) -> u64 {
    masks.apply(address)
}

/// Default placement of a region of `size` bytes: the largest `size`-aligned
/// address not above `0xDEADB800`.
pub fn default_base(size: u64) -> u64 {
    0xDEAD_B800 & !(size.max(1) - 1)
}

/// Fractions of the region given to context, stack and heap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub context: f64,
    pub stack: f64,
    pub heap: f64,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        LayoutSpec { context: 0.25, stack: 0.25, heap: 0.5 }
    }
}

/// Byte offsets of the sub-regions, relative to the sandbox base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub context_offset: u64,
    pub context_len: u64,
    pub stack_offset: u64,
    pub stack_len: u64,
    pub heap_offset: u64,
    pub heap_len: u64,
}

impl Layout {
    pub fn compute(size: u64, spec: &LayoutSpec) -> Result<Layout, SandboxError> {
        let fracs = [spec.context, spec.stack, spec.heap];
        if fracs.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(SandboxError::BadLayout("fractions must be finite and non-negative".into()));
        }
        if fracs.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(SandboxError::BadLayout("fractions sum to more than 1".into()));
        }
        let part = |f: f64| ((size as f64 * f) as u64) & !7;
        let usable = size - RED_ZONE;
        let context_len = part(spec.context).min(usable);
        let stack_offset = context_len;
        let stack_len = part(spec.stack).min(usable - stack_offset);
        let heap_offset = stack_offset + stack_len;
        let heap_len = part(spec.heap).min(usable - heap_offset);
        Ok(Layout { context_offset: 0, context_len, stack_offset, stack_len, heap_offset, heap_len })
    }

    pub fn end(&self) -> u64 {
        self.heap_offset + self.heap_len
    }
}

/// Per-execution counters of retired instructions and executed checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutedCounters {
    pub mask_executed: u64,
    pub trampoline_executed: u64,
    pub instructions_retired: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MirrorKind {
    RingbufReservation,
    MapValue,
    ContextField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MirrorState {
    Reserved,
    Committed,
    Discarded,
    Live,
}

/// Which external object a mirror stands in for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelRef {
    Ringbuf { ring: usize, reservation: u64 },
    MapValue { map: usize, key: u32 },
    Context,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MirrorEntry {
    pub kind: MirrorKind,
    pub kernel_ref: KernelRef,
    pub length: u64,
    pub state: MirrorState,
}

/// An access whose address was changed by masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfinementEvent {
    pub instruction_index: usize,
    pub original_address: u64,
    pub masked_address: u64,
}

/// Trusted bookkeeping kept outside the maskable region.
#[derive(Debug, Clone, Default)]
pub struct SandboxMetadata {
    pub heap_cursor: u64,
    /// Keyed by the sandbox address of the mirror copy.
    pub mirror_map: BTreeMap<u64, MirrorEntry>,
    /// Bytes of each map-value mirror as first copied in; unchanged copies
    /// are not written back.
    pub snapshots: BTreeMap<u64, Vec<u8>>,
    pub counters: ExecutedCounters,
    pub confinement_events: Vec<ConfinementEvent>,
    pub detect_mode: bool,
}

#[derive(Debug, Clone)]
pub struct Sandbox {
    base: u64,
    size: u64,
    masks: AddressMasks,
    layout: Layout,
    data: Vec<u8>,
    pub metadata: SandboxMetadata,
}

impl Sandbox {
    /// A region of `size` bytes at [`default_base`].
    pub fn new(size: u64, spec: &LayoutSpec) -> Result<Sandbox, SandboxError> {
        Sandbox::with_base(default_base(size), size, spec)
    }

    pub fn with_base(base: u64, size: u64, spec: &LayoutSpec) -> Result<Sandbox, SandboxError> {
        let masks = compute_masks(base, size)?;
        let layout = Layout::compute(size, spec)?;
        let alloc = size + RED_ZONE;
        let mut data = Vec::new();
        data.try_reserve_exact(alloc as usize).map_err(|_| SandboxError::AllocationFailure(alloc))?;
        data.resize(alloc as usize, 0);
        let metadata = SandboxMetadata { heap_cursor: layout.heap_offset, ..Default::default() };
        Ok(Sandbox { base, size, masks, layout, data, metadata })
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn masks(&self) -> AddressMasks {
        self.masks
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn context_base(&self) -> u64 {
        self.base + self.layout.context_offset
    }

    /// Initial frame pointer: one past the top of the stack area.
    pub fn stack_top(&self) -> u64 {
        self.base + self.layout.stack_offset + self.layout.stack_len
    }

    pub fn heap_range(&self) -> std::ops::Range<u64> {
        let start = self.base + self.layout.heap_offset;
        start..start + self.layout.heap_len
    }

    /// One past the last owned byte (region plus red zone).
    pub fn alloc_end(&self) -> u64 {
        self.base + self.data.len() as u64
    }

    /// Whole backing allocation, red zone included.
    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn contains(&self, addr: u64, len: u64) -> bool {
        addr >= self.base && addr.checked_add(len).is_some_and(|end| end <= self.alloc_end())
    }

    pub fn read(&self, addr: u64, len: usize) -> Option<&[u8]> {
        if !self.contains(addr, len as u64) {
            return None;
        }
        let at = (addr - self.base) as usize;
        Some(&self.data[at..at + len])
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> Option<()> {
        if !self.contains(addr, bytes.len() as u64) {
            return None;
        }
        let at = (addr - self.base) as usize;
        self.data[at..at + bytes.len()].copy_from_slice(bytes);
        Some(())
    }

    pub fn slice_mut(&mut self, addr: u64, len: usize) -> Option<&mut [u8]> {
        if !self.contains(addr, len as u64) {
            return None;
        }
        let at = (addr - self.base) as usize;
        Some(&mut self.data[at..at + len])
    }

    /// Bump-allocate `length` bytes from the heap area, 8-byte aligned.
    pub fn alloc_heap(&mut self, length: u64) -> Result<u64, SandboxError> {
        if length == 0 {
            return Err(SandboxError::EmptyAllocation);
        }
        let start = (self.metadata.heap_cursor + 7) & !7;
        let limit = self.layout.heap_offset + self.layout.heap_len;
        let available = limit.saturating_sub(start);
        if length > available {
            return Err(SandboxError::HeapExhausted { requested: length, available });
        }
        self.metadata.heap_cursor = start + length;
        Ok(self.base + start)
    }

    pub fn record_confinement(&mut self, instruction_index: usize, original: u64, masked: u64) {
        if self.metadata.detect_mode && original != masked {
            self.metadata.confinement_events.push(ConfinementEvent {
                instruction_index,
                original_address: original,
                masked_address: masked,
            });
        }
    }

    /// Zero the region and clear per-run metadata. Masks, layout and the
    /// detect-mode setting are kept.
    pub fn reset(&mut self) {
        self.data.fill(0);
        let detect_mode = self.metadata.detect_mode;
        self.metadata = SandboxMetadata { heap_cursor: self.layout.heap_offset, detect_mode, ..Default::default() };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_masks() {
        let m = compute_masks(0xDEAD_B800, 2048).unwrap();
        assert_eq!(m, AddressMasks { and_mask: 0x7FF, or_mask: 0xDEAD_B800 });
        assert_eq!(mask_address(&m, 0xDEAF_1234), 0xDEAD_BA34);
        assert_eq!(mask_address(&m, 0xDEAD_B900), 0xDEAD_B900);
    }

    #[test]
    fn mask_errors() {
        assert_eq!(compute_masks(0x1000, 0x1000).unwrap(), AddressMasks { and_mask: 0xFFF, or_mask: 0x1000 });
        assert_eq!(compute_masks(0xDEAD_B900, 2048), Err(SandboxError::BadAlignment { base: 0xDEAD_B900, size: 2048 }));
        assert_eq!(compute_masks(0, 4097), Err(SandboxError::BadSize(4097)));
        assert_eq!(compute_masks(0, 32), Err(SandboxError::BadSize(32)));
    }

    #[test]
    fn exhaustive_small_sweep() {
        let m = compute_masks(0xDEAD_B800, 2048).unwrap();
        for a in 0u64..1 << 16 {
            let r = mask_address(&m, a);
            assert!((0xDEAD_B800..0xDEAD_C000).contains(&r));
        }
    }

    #[test]
    fn default_layout_page() {
        // Independent arithmetic: 25% / 25% / remainder minus the red zone.
        let s = Sandbox::new(4096, &LayoutSpec::default()).unwrap();
        let l = *s.layout();
        assert_eq!((l.context_offset, l.context_len), (0, 1024));
        assert_eq!((l.stack_offset, l.stack_len), (1024, 1024));
        assert_eq!((l.heap_offset, l.heap_len), (2048, 4096 - 2048 - 8));
        assert_eq!(s.base() % 4096, 0);
        assert_eq!(s.bytes().len(), 4096 + 8);
        assert_eq!(s.stack_top(), s.base() + 2048);
        assert_eq!(s.metadata.heap_cursor, 2048);
    }

    #[test]
    fn minimum_size() {
        let s = Sandbox::new(64, &LayoutSpec::default()).unwrap();
        let l = *s.layout();
        assert_eq!((l.context_len, l.stack_len, l.heap_len), (16, 16, 24));
        assert!(l.end() <= 64 - RED_ZONE);
        assert!(matches!(Sandbox::new(4097, &LayoutSpec::default()), Err(SandboxError::BadSize(4097))));
        let over = LayoutSpec { context: 0.5, stack: 0.5, heap: 0.5 };
        assert!(matches!(Sandbox::new(4096, &over), Err(SandboxError::BadLayout(_))));
    }

    #[test]
    fn bump_allocation() {
        let mut s = Sandbox::new(4096, &LayoutSpec::default()).unwrap();
        let a = s.alloc_heap(16).unwrap();
        let b = s.alloc_heap(16).unwrap();
        assert_eq!(b - a, 16);
        assert_eq!(a, s.heap_range().start);
        let c = s.alloc_heap(3).unwrap();
        let d = s.alloc_heap(1).unwrap();
        assert_eq!(d - c, 8);
        assert!(matches!(s.alloc_heap(4096), Err(SandboxError::HeapExhausted { .. })));
        assert_eq!(s.alloc_heap(0), Err(SandboxError::EmptyAllocation));
    }

    #[test]
    fn reset_clears_everything_but_masks() {
        let mut s = Sandbox::new(4096, &LayoutSpec::default()).unwrap();
        let masks = s.masks();
        let a = s.alloc_heap(8).unwrap();
        s.write(a, &[0xAB; 8]).unwrap();
        s.metadata.counters.mask_executed = 3;
        s.metadata.mirror_map.insert(
            a,
            MirrorEntry {
                kind: MirrorKind::MapValue,
                kernel_ref: KernelRef::Context,
                length: 8,
                state: MirrorState::Live,
            },
        );
        s.reset();
        assert!(s.bytes().iter().all(|&b| b == 0));
        assert_eq!(s.metadata.counters, ExecutedCounters::default());
        assert!(s.metadata.mirror_map.is_empty());
        assert_eq!(s.metadata.heap_cursor, s.layout().heap_offset);
        assert_eq!(s.masks(), masks);
        let once = s.bytes().to_vec();
        s.reset();
        assert_eq!(s.bytes(), &once[..]);
    }

    #[test]
    fn accessors_respect_bounds() {
        let mut s = Sandbox::new(64, &LayoutSpec::default()).unwrap();
        let top = s.base() + 63;
        assert!(s.read(top, 8).is_some());
        assert!(s.read(top + 2, 8).is_none());
        assert!(s.read(s.base() - 1, 1).is_none());
        assert!(s.write(u64::MAX - 3, &[0; 8]).is_none());
    }

    #[test]
    fn confinement_events_only_in_detect_mode() {
        let mut s = Sandbox::new(64, &LayoutSpec::default()).unwrap();
        s.record_confinement(0, 1, 2);
        assert!(s.metadata.confinement_events.is_empty());
        s.metadata.detect_mode = true;
        s.record_confinement(0, 5, 5);
        s.record_confinement(3, 1, 2);
        assert_eq!(s.metadata.confinement_events.len(), 1);
        s.reset();
        assert!(s.metadata.detect_mode);
        assert!(s.metadata.confinement_events.is_empty());
    }
}
