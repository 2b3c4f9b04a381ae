// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Ring buffer with reserve/commit/discard, and the mirrored helpers that
//! hand the program a sandbox heap buffer instead of the kernel reservation.

use std::collections::BTreeMap;

use crate::executor::Trap;
use crate::sandbox::{KernelRef, MirrorEntry, MirrorKind, MirrorState, Sandbox};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelRingBuffer {
    capacity: u64,
    used: u64,
    records: Vec<Vec<u8>>,
    reservations: BTreeMap<u64, Vec<u8>>,
    next_handle: u64,
}

/// State needed to undo a trapped execution's effects on a ring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingCheckpoint {
    used: u64,
    records: usize,
    reservations: BTreeMap<u64, Vec<u8>>,
    next_handle: u64,
}

impl KernelRingBuffer {
    pub fn new(capacity: u64) -> Self {
        KernelRingBuffer { capacity, used: 0, records: Vec::new(), reservations: BTreeMap::new(), next_handle: 1 }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Bytes held by committed records and open reservations.
    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn records(&self) -> &[Vec<u8>] {
        &self.records
    }

    pub fn open_reservations(&self) -> usize {
        self.reservations.len()
    }

    pub fn can_reserve(&self, size: u64) -> bool {
        size > 0 && self.used.checked_add(size).is_some_and(|u| u <= self.capacity)
    }

    pub fn reserve(&mut self, size: u64) -> Option<u64> {
        if !self.can_reserve(size) {
            return None;
        }
        let handle = self.next_handle;
        self.next_handle += 1;
        self.used += size;
        self.reservations.insert(handle, vec![0; size as usize]);
        Some(handle)
    }

    /// Fill the reservation with `bytes` and publish it as a record.
    pub fn commit(&mut self, handle: u64, bytes: &[u8]) -> bool {
        match self.reservations.remove(&handle) {
            Some(mut slot) if slot.len() == bytes.len() => {
                slot.copy_from_slice(bytes);
                self.records.push(slot);
                true
            }
            Some(slot) => {
                self.reservations.insert(handle, slot);
                false
            }
            None => false,
        }
    }

    pub fn discard(&mut self, handle: u64) -> bool {
        match self.reservations.remove(&handle) {
            Some(slot) => {
                self.used -= slot.len() as u64;
                true
            }
            None => false,
        }
    }

    /// Consumer side: pop the oldest record and free its space.
    pub fn consume(&mut self) -> Option<Vec<u8>> {
        if self.records.is_empty() {
            return None;
        }
        let r = self.records.remove(0);
        self.used -= r.len() as u64;
        Some(r)
    }

    pub fn checkpoint(&self) -> RingCheckpoint {
        RingCheckpoint {
            used: self.used,
            records: self.records.len(),
            reservations: self.reservations.clone(),
            next_handle: self.next_handle,
        }
    }

    /// Return to the state at `cp`. Only valid when no consumer ran in
    /// between.
    pub fn rollback(&mut self, cp: &RingCheckpoint) {
        self.records.truncate(cp.records);
        self.reservations.clone_from(&cp.reservations);
        self.used = cp.used;
        self.next_handle = cp.next_handle;
    }
}

/// Reserve `size` bytes in `rings[ring]`, returning a sandbox heap buffer
/// standing in for the reservation, or 0 on failure.
pub fn ringbuf_reserve(sandbox: &mut Sandbox, rings: &mut [KernelRingBuffer], ring: usize, size: u64) -> u64 {
    let Some(rb) = rings.get_mut(ring) else { return 0 };
    if !rb.can_reserve(size) {
        return 0;
    }
    let Ok(addr) = sandbox.alloc_heap(size) else { return 0 };
    let reservation = rb.reserve(size).expect("capacity checked above");
    sandbox.metadata.mirror_map.insert(
        addr,
        MirrorEntry {
            kind: MirrorKind::RingbufReservation,
            kernel_ref: KernelRef::Ringbuf { ring, reservation },
            length: size,
            state: MirrorState::Reserved,
        },
    );
    addr
}

fn live_reservation(sandbox: &Sandbox, address: u64) -> Result<(usize, u64, u64), Trap> {
    match sandbox.metadata.mirror_map.get(&address) {
        Some(MirrorEntry {
            kind: MirrorKind::RingbufReservation,
            kernel_ref: KernelRef::Ringbuf { ring, reservation },
            length,
            state: MirrorState::Reserved,
        }) => Ok((*ring, *reservation, *length)),
        _ => Err(Trap::InvalidReservation { address }),
    }
}

/// Copy the heap buffer at `address` into its kernel reservation and publish it.
pub fn ringbuf_commit(sandbox: &mut Sandbox, rings: &mut [KernelRingBuffer], address: u64) -> Result<(), Trap> {
    let (ring, handle, len) = live_reservation(sandbox, address)?;
    let bytes = sandbox.read(address, len as usize).ok_or(Trap::InvalidReservation { address })?.to_vec();
    let rb = rings.get_mut(ring).ok_or(Trap::InvalidReservation { address })?;
    if !rb.commit(handle, &bytes) {
        return Err(Trap::InvalidReservation { address });
    }
    if let Some(e) = sandbox.metadata.mirror_map.get_mut(&address) {
        e.state = MirrorState::Committed;
    }
    Ok(())
}

pub fn ringbuf_discard(sandbox: &mut Sandbox, rings: &mut [KernelRingBuffer], address: u64) -> Result<(), Trap> {
    let (ring, handle, _) = live_reservation(sandbox, address)?;
    let rb = rings.get_mut(ring).ok_or(Trap::InvalidReservation { address })?;
    if !rb.discard(handle) {
        return Err(Trap::InvalidReservation { address });
    }
    if let Some(e) = sandbox.metadata.mirror_map.get_mut(&address) {
        e.state = MirrorState::Discarded;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::LayoutSpec;

    fn setup() -> (Sandbox, Vec<KernelRingBuffer>) {
        (Sandbox::new(4096, &LayoutSpec::default()).unwrap(), vec![KernelRingBuffer::new(64)])
    }

    #[test]
    fn reserve_records_mirror() {
        let (mut sb, mut rings) = setup();
        let a = ringbuf_reserve(&mut sb, &mut rings, 0, 16);
        assert_ne!(a, 0);
        assert!(sb.heap_range().contains(&a) && sb.heap_range().contains(&(a + 15)));
        assert_eq!(sb.metadata.mirror_map.len(), 1);
        assert_eq!(sb.metadata.mirror_map[&a].state, MirrorState::Reserved);
        assert_eq!(rings[0].open_reservations(), 1);
    }

    #[test]
    fn reserve_failures_record_nothing() {
        let (mut sb, mut rings) = setup();
        let cursor = sb.metadata.heap_cursor;
        assert_eq!(ringbuf_reserve(&mut sb, &mut rings, 0, 65), 0);
        assert_eq!(ringbuf_reserve(&mut sb, &mut rings, 0, 0), 0);
        assert_eq!(ringbuf_reserve(&mut sb, &mut rings, 3, 8), 0);
        let mut big = vec![KernelRingBuffer::new(1 << 20)];
        assert_eq!(ringbuf_reserve(&mut sb, &mut big, 0, 4096), 0); // heap too small
        assert!(sb.metadata.mirror_map.is_empty());
        assert_eq!(sb.metadata.heap_cursor, cursor);
        assert_eq!(big[0].used(), 0);
    }

    #[test]
    fn two_reservations_disjoint() {
        let (mut sb, mut rings) = setup();
        let a = ringbuf_reserve(&mut sb, &mut rings, 0, 12);
        let b = ringbuf_reserve(&mut sb, &mut rings, 0, 12);
        assert!(a + 12 <= b || b + 12 <= a);
    }

    #[test]
    fn commit_publishes_bytes() {
        let (mut sb, mut rings) = setup();
        let a = ringbuf_reserve(&mut sb, &mut rings, 0, 8);
        sb.write(a, &[0xAB; 8]).unwrap();
        ringbuf_commit(&mut sb, &mut rings, a).unwrap();
        assert_eq!(rings[0].records(), &[vec![0xAB; 8]]);
        assert_eq!(sb.metadata.mirror_map[&a].state, MirrorState::Committed);
        assert_eq!(ringbuf_commit(&mut sb, &mut rings, a), Err(Trap::InvalidReservation { address: a }));
        assert_eq!(rings[0].records().len(), 1);
    }

    #[test]
    fn unknown_or_derived_handles_trap() {
        let (mut sb, mut rings) = setup();
        let a = ringbuf_reserve(&mut sb, &mut rings, 0, 8);
        let h = sb.heap_range().start + 256;
        assert_eq!(ringbuf_commit(&mut sb, &mut rings, h), Err(Trap::InvalidReservation { address: h }));
        assert!(ringbuf_commit(&mut sb, &mut rings, a + 4).is_err());
        assert!(ringbuf_discard(&mut sb, &mut rings, a + 4).is_err());
    }

    #[test]
    fn discard_then_commit() {
        let (mut sb, mut rings) = setup();
        let a = ringbuf_reserve(&mut sb, &mut rings, 0, 64);
        assert_eq!(ringbuf_reserve(&mut sb, &mut rings, 0, 8), 0); // full
        ringbuf_discard(&mut sb, &mut rings, a).unwrap();
        assert!(rings[0].records().is_empty());
        assert!(ringbuf_commit(&mut sb, &mut rings, a).is_err());
        // capacity came back
        assert_ne!(ringbuf_reserve(&mut sb, &mut rings, 0, 64), 0);
    }

    #[test]
    fn checkpoint_rollback() {
        let mut rb = KernelRingBuffer::new(100);
        let h = rb.reserve(10).unwrap();
        assert!(rb.commit(h, &[1; 10]));
        let cp = rb.checkpoint();
        let h2 = rb.reserve(20).unwrap();
        assert!(rb.commit(h2, &[2; 20]));
        rb.reserve(5).unwrap();
        rb.rollback(&cp);
        assert_eq!(rb.records(), &[vec![1; 10]]);
        assert_eq!(rb.used(), 10);
        assert_eq!(rb.open_reservations(), 0);
        assert_eq!(rb.consume(), Some(vec![1; 10]));
        assert_eq!(rb.used(), 0);
    }
}
