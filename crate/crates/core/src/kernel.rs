// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Everything outside the sandbox: ring buffers, maps and plain kernel
//! memory regions sharing the VM's flat address space.

use serde::Serialize;

use crate::helpers::{ArrayMap, KernelRingBuffer, RingCheckpoint};
use crate::sandbox::Sandbox;

/// Fill pattern of canary regions ("KERNEL!!" little-endian). The pattern is
/// phased so that the u64 at [`CRED_ADDR`] (and every 8 bytes from it) reads
/// exactly `CANARY`.
pub const CANARY: u64 = u64::from_le_bytes(*b"KERNEL!!");
/// Address of the simulated credential structure targeted by the exploits.
pub const CRED_ADDR: u64 = 0xDEAF_1234;
pub const CRED_REGION_BASE: u64 = 0xDEAF_1000;

fn canary_phase(addr: u64) -> usize {
    (addr.wrapping_sub(CRED_ADDR) % 8) as usize
}

/// True when `bytes` holds at least four consecutive bytes of the canary
/// pattern, in any phase. Sandbox memory starts zeroed, so this only fires
/// on data copied out of a canary region.
pub fn leaks_canary(bytes: &[u8]) -> bool {
    let pat = CANARY.to_le_bytes();
    bytes.windows(4).any(|w| (0..8).any(|p| (0..4).all(|i| w[i] == pat[(p + i) % 8])))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KernelRegion {
    pub name: String,
    pub base: u64,
    pub bytes: Vec<u8>,
}

impl KernelRegion {
    pub fn end(&self) -> u64 {
        self.base + self.bytes.len() as u64
    }

    fn canary(name: &str, base: u64, len: usize) -> Self {
        let pat = CANARY.to_le_bytes();
        let bytes = (0..len as u64).map(|i| pat[canary_phase(base + i)]).collect();
        KernelRegion { name: name.into(), base, bytes }
    }
}

/// Non-sandbox memory reachable by address. Only raw (uninstrumented)
/// execution can get here.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct KernelMemory {
    regions: Vec<KernelRegion>,
}

impl KernelMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Canary regions around `sandbox`: directly below it, directly above
    /// its allocation, and a credential page at [`CRED_REGION_BASE`] when that
    /// does not overlap the sandbox.
    pub fn with_canaries(sandbox: &Sandbox) -> Self {
        let mut m = KernelMemory::new();
        let below = sandbox.base().saturating_sub(256);
        if below < sandbox.base() {
            m.add(KernelRegion::canary("below", below, (sandbox.base() - below) as usize));
        }
        m.add(KernelRegion::canary("above", sandbox.alloc_end(), 256));
        let cred = KernelRegion::canary("cred", CRED_REGION_BASE, 0x1000);
        if !m.overlaps(&cred) && (cred.end() <= sandbox.base() || cred.base >= sandbox.alloc_end()) {
            m.add(cred);
        }
        m
    }

    fn overlaps(&self, r: &KernelRegion) -> bool {
        self.regions.iter().any(|o| r.base < o.end() && o.base < r.end())
    }

    /// Add a region unless it overlaps an existing one.
    pub fn add(&mut self, region: KernelRegion) -> bool {
        if self.overlaps(&region) {
            return false;
        }
        self.regions.push(region);
        true
    }

    pub fn regions(&self) -> &[KernelRegion] {
        &self.regions
    }

    pub fn region(&self, name: &str) -> Option<&KernelRegion> {
        self.regions.iter().find(|r| r.name == name)
    }

    fn locate(&self, addr: u64, len: usize) -> Option<(usize, usize)> {
        let end = addr.checked_add(len as u64)?;
        self.regions
            .iter()
            .position(|r| addr >= r.base && end <= r.end())
            .map(|i| (i, (addr - self.regions[i].base) as usize))
    }

    pub fn read(&self, addr: u64, len: usize) -> Option<&[u8]> {
        let (i, at) = self.locate(addr, len)?;
        Some(&self.regions[i].bytes[at..at + len])
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> Option<()> {
        let (i, at) = self.locate(addr, bytes.len())?;
        self.regions[i].bytes[at..at + bytes.len()].copy_from_slice(bytes);
        Some(())
    }

    /// True when every canary region still holds only the canary pattern.
    pub fn canaries_intact(&self) -> bool {
        self.regions.iter().all(|r| {
            let pat = CANARY.to_le_bytes();
            r.bytes.iter().enumerate().all(|(i, &b)| b == pat[canary_phase(r.base + i as u64)])
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KernelObjects {
    pub ringbufs: Vec<KernelRingBuffer>,
    pub maps: Vec<ArrayMap>,
    pub memory: KernelMemory,
}

#[derive(Debug, Clone)]
pub struct KernelCheckpoint {
    rings: Vec<RingCheckpoint>,
}

impl KernelObjects {
    /// One 4 KiB ring buffer and one 16-entry array map of u64 values.
    pub fn standard() -> Self {
        KernelObjects {
            ringbufs: vec![KernelRingBuffer::new(4096)],
            maps: vec![ArrayMap::new(8, 16)],
            memory: KernelMemory::new(),
        }
    }

    pub fn checkpoint(&self) -> KernelCheckpoint {
        KernelCheckpoint { rings: self.ringbufs.iter().map(KernelRingBuffer::checkpoint).collect() }
    }

    pub fn rollback(&mut self, cp: &KernelCheckpoint) {
        for (rb, c) in self.ringbufs.iter_mut().zip(&cp.rings) {
            rb.rollback(c);
        }
    }
}
