// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Array maps. Lookups hand out a heap copy of the value; copies are written
//! back only when the program exits without trapping.

use crate::sandbox::{KernelRef, MirrorEntry, MirrorKind, MirrorState, Sandbox};

pub const EINVAL: i64 = 22;
pub const E2BIG: i64 = 7;
pub const ENOMEM: i64 = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayMap {
    value_size: u32,
    max_entries: u32,
    data: Vec<u8>,
}

impl ArrayMap {
    pub fn new(value_size: u32, max_entries: u32) -> Self {
        ArrayMap { value_size, max_entries, data: vec![0; value_size as usize * max_entries as usize] }
    }

    pub fn value_size(&self) -> u32 {
        self.value_size
    }

    pub fn max_entries(&self) -> u32 {
        self.max_entries
    }

    pub fn get(&self, key: u32) -> Option<&[u8]> {
        (key < self.max_entries).then(|| {
            let at = key as usize * self.value_size as usize;
            &self.data[at..at + self.value_size as usize]
        })
    }

    pub fn set(&mut self, key: u32, value: &[u8]) -> bool {
        if key >= self.max_entries || value.len() != self.value_size as usize {
            return false;
        }
        let at = key as usize * self.value_size as usize;
        self.data[at..at + value.len()].copy_from_slice(value);
        true
    }

    pub fn backing(&self) -> &[u8] {
        &self.data
    }
}

fn stage_copy(sandbox: &mut Sandbox, map: usize, key: u32, bytes: &[u8], snapshot: Option<Vec<u8>>) -> Option<u64> {
    let addr = sandbox.alloc_heap(bytes.len() as u64).ok()?;
    sandbox.write(addr, bytes)?;
    sandbox.metadata.mirror_map.insert(
        addr,
        MirrorEntry {
            kind: MirrorKind::MapValue,
            kernel_ref: KernelRef::MapValue { map, key },
            length: bytes.len() as u64,
            state: MirrorState::Live,
        },
    );
    if let Some(s) = snapshot {
        sandbox.metadata.snapshots.insert(addr, s);
    }
    Some(addr)
}

/// Copy `maps[map][key]` onto the sandbox heap; 0 when absent.
pub fn map_lookup(sandbox: &mut Sandbox, maps: &[ArrayMap], map: usize, key: u32) -> u64 {
    let Some(value) = maps.get(map).and_then(|m| m.get(key)) else { return 0 };
    let value = value.to_vec();
    stage_copy(sandbox, map, key, &value, Some(value.clone())).unwrap_or(0)
}

/// Stage a full-value update read from sandbox memory. Applied at exit like
/// any other live copy. Returns 0 or a negative errno.
pub fn map_update(sandbox: &mut Sandbox, maps: &[ArrayMap], map: usize, key: u32, value_addr: u64) -> i64 {
    let Some(m) = maps.get(map) else { return -EINVAL };
    if key >= m.max_entries() {
        return -E2BIG;
    }
    let Some(value) = sandbox.read(value_addr, m.value_size() as usize).map(<[u8]>::to_vec) else {
        return -EINVAL;
    };
    match stage_copy(sandbox, map, key, &value, None) {
        Some(_) => 0,
        None => -ENOMEM,
    }
}

/// Write every changed live copy back to its backing slot, oldest first.
pub fn map_sync(sandbox: &Sandbox, maps: &mut [ArrayMap]) {
    for (&addr, entry) in &sandbox.metadata.mirror_map {
        let (KernelRef::MapValue { map, key }, MirrorState::Live) = (entry.kernel_ref, entry.state) else { continue };
        let Some(bytes) = sandbox.read(addr, entry.length as usize) else { continue };
        if sandbox.metadata.snapshots.get(&addr).is_some_and(|s| s == bytes) {
            continue;
        }
        if let Some(m) = maps.get_mut(map) {
            m.set(key, bytes);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::LayoutSpec;

    fn setup() -> (Sandbox, Vec<ArrayMap>) {
        let mut m = ArrayMap::new(8, 2);
        m.set(0, &7u64.to_le_bytes());
        m.set(1, &9u64.to_le_bytes());
        (Sandbox::new(4096, &LayoutSpec::default()).unwrap(), vec![m])
    }

    #[test]
    fn lookup_copies_value() {
        let (mut sb, maps) = setup();
        let a = map_lookup(&mut sb, &maps, 0, 0);
        assert!(sb.heap_range().contains(&a));
        assert_eq!(sb.read(a, 8).unwrap(), maps[0].get(0).unwrap());
        assert_eq!(sb.metadata.mirror_map[&a].state, MirrorState::Live);
        assert_eq!(map_lookup(&mut sb, &maps, 0, 2), 0);
        assert_eq!(map_lookup(&mut sb, &maps, 5, 0), 0);
        let b = map_lookup(&mut sb, &maps, 0, 0);
        assert_ne!(a, b);
    }

    #[test]
    fn sync_writes_changed_copies() {
        let (mut sb, mut maps) = setup();
        let a = map_lookup(&mut sb, &maps, 0, 1);
        let _untouched = map_lookup(&mut sb, &maps, 0, 1);
        sb.write(a, &10u64.to_le_bytes()).unwrap();
        map_sync(&sb, &mut maps);
        assert_eq!(maps[0].get(1).unwrap(), 10u64.to_le_bytes());
        assert_eq!(maps[0].get(0).unwrap(), 7u64.to_le_bytes());
    }

    #[test]
    fn sync_without_lookups_is_noop() {
        let (sb, mut maps) = setup();
        let before = maps.clone();
        map_sync(&sb, &mut maps);
        assert_eq!(maps, before);
    }

    #[test]
    fn update_is_staged() {
        let (mut sb, mut maps) = setup();
        let src = sb.stack_top() - 8;
        sb.write(src, &42u64.to_le_bytes()).unwrap();
        assert_eq!(map_update(&mut sb, &maps, 0, 0, src), 0);
        assert_eq!(maps[0].get(0).unwrap(), 7u64.to_le_bytes());
        map_sync(&sb, &mut maps);
        assert_eq!(maps[0].get(0).unwrap(), 42u64.to_le_bytes());
        assert_eq!(map_update(&mut sb, &maps, 0, 2, src), -E2BIG);
        assert_eq!(map_update(&mut sb, &maps, 1, 0, src), -EINVAL);
    }
}
