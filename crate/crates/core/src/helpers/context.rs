// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Context mirroring.
//!
//! The context handed to a program at invocation is copied into the
//! sandbox's context area. Fields that hold addresses of auxiliary regions
//! (packet data, for instance) have those regions copied right after the
//! context and the field rewritten to point at the copy. At a clean exit,
//! writable fields and regions are copied back.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::ProgramType;
use crate::sandbox::{KernelRef, MirrorEntry, MirrorKind, MirrorState, Sandbox};

/// Kernel-side address at which packet payloads are presented.
pub const PACKET_KERNEL_ADDR: u64 = 0x4000_0000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContextError {
    #[error("context needs {needed} bytes, context area holds {available}")]
    ContextTooLarge { needed: u64, available: u64 },
    #[error("invalid context descriptor: {0}")]
    BadDescriptor(String),
    #[error("context input is {got} bytes, descriptor says {expected}")]
    LengthMismatch { expected: u64, got: u64 },
    #[error("field `{0}` points outside every supplied region")]
    DanglingPointer(String),
    #[error("field `{field}` is too narrow to hold sandbox address {addr:#x}")]
    FieldTooNarrow { field: String, addr: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    #[default]
    Scalar,
    RegionAddress,
}

/// Which end of its region an address field refers to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    #[default]
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextField {
    pub name: String,
    pub offset: u64,
    pub length: u64,
    #[serde(default)]
    pub writable: bool,
    #[serde(default)]
    pub kind: FieldKind,
    /// Upper bound on the referenced region's length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_len: Option<u64>,
    #[serde(default)]
    pub anchor: Anchor,
}

impl ContextField {
    fn scalar(name: &str, offset: u64, length: u64, writable: bool) -> Self {
        ContextField {
            name: name.into(),
            offset,
            length,
            writable,
            kind: FieldKind::Scalar,
            region_len: None,
            anchor: Anchor::Start,
        }
    }

    fn region(name: &str, offset: u64, anchor: Anchor, writable: bool) -> Self {
        ContextField {
            name: name.into(),
            offset,
            length: 4,
            writable,
            kind: FieldKind::RegionAddress,
            region_len: None,
            anchor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDescriptor {
    pub total_len: u64,
    pub fields: Vec<ContextField>,
}

impl ContextDescriptor {
    pub fn empty() -> Self {
        ContextDescriptor { total_len: 0, fields: Vec::new() }
    }

    /// `struct xdp_md`: 32-bit data/data_end/data_meta pointers followed by
    /// interface indices. Packet bytes are writable; the indices are not.
    pub fn xdp() -> Self {
        ContextDescriptor {
            total_len: 24,
            fields: vec![
                ContextField::region("data", 0, Anchor::Start, true),
                ContextField::region("data_end", 4, Anchor::End, false),
                ContextField::region("data_meta", 8, Anchor::Start, false),
                ContextField::scalar("ingress_ifindex", 12, 4, false),
                ContextField::scalar("rx_queue_index", 16, 4, false),
                ContextField::scalar("egress_ifindex", 20, 4, false),
            ],
        }
    }

    /// A reduced socket-buffer view: length, protocol, a writable mark and
    /// read-only packet pointers.
    pub fn socket_filter() -> Self {
        ContextDescriptor {
            total_len: 24,
            fields: vec![
                ContextField::scalar("len", 0, 4, false),
                ContextField::scalar("protocol", 4, 4, false),
                ContextField::scalar("mark", 8, 4, true),
                ContextField::region("data", 12, Anchor::Start, false),
                ContextField::region("data_end", 16, Anchor::End, false),
                ContextField::scalar("ifindex", 20, 4, false),
            ],
        }
    }

    /// The built-in layout for `ty`.
    pub fn for_program_type(ty: ProgramType) -> Self {
        match ty {
            ProgramType::Xdp => Self::xdp(),
            ProgramType::SocketFilter => Self::socket_filter(),
            ProgramType::Kprobe => Self::empty(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ContextError> {
        let d: ContextDescriptor =
            serde_json::from_str(text).map_err(|e| ContextError::BadDescriptor(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), ContextError> {
        let bad = |m: String| Err(ContextError::BadDescriptor(m));
        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        for f in &self.fields {
            if !matches!(f.length, 1 | 2 | 4 | 8) {
                return bad(format!("field `{}` has length {}, expected 1, 2, 4 or 8", f.name, f.length));
            }
            if f.kind == FieldKind::RegionAddress && f.length < 4 {
                return bad(format!("address field `{}` must be 4 or 8 bytes", f.name));
            }
            if f.offset.checked_add(f.length).is_none_or(|end| end > self.total_len) {
                return bad(format!("field `{}` extends past total_len {}", f.name, self.total_len));
            }
            spans.push((f.offset, f.offset + f.length, &f.name));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[0].1 > w[1].0 {
                return bad(format!("fields `{}` and `{}` overlap", w[0].2, w[1].2));
            }
        }
        Ok(())
    }
}

/// A region referenced from the context, as it exists outside the sandbox.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxRegion {
    pub kernel_addr: u64,
    pub bytes: Vec<u8>,
}

/// The kernel-side context object and its auxiliary regions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextInput {
    pub bytes: Vec<u8>,
    pub regions: Vec<AuxRegion>,
}

fn write_le(buf: &mut [u8], value: u64) {
    let n = buf.len();
    buf.copy_from_slice(&value.to_le_bytes()[..n]);
}

fn read_le(buf: &[u8]) -> u64 {
    let mut b = [0u8; 8];
    b[..buf.len()].copy_from_slice(buf);
    u64::from_le_bytes(b)
}

impl ContextInput {
    /// Context for `desc` with `packet` as its single region: address fields
    /// point at the packet start or end per their anchor, everything else 0.
    pub fn for_packet(desc: &ContextDescriptor, packet: &[u8]) -> Self {
        let mut bytes = vec![0u8; desc.total_len as usize];
        for f in &desc.fields {
            let span = &mut bytes[f.offset as usize..(f.offset + f.length) as usize];
            match (f.kind, f.anchor) {
                (FieldKind::RegionAddress, Anchor::Start) => write_le(span, PACKET_KERNEL_ADDR),
                (FieldKind::RegionAddress, Anchor::End) => write_le(span, PACKET_KERNEL_ADDR + packet.len() as u64),
                (FieldKind::Scalar, _) if f.name == "len" => write_le(span, packet.len() as u64),
                _ => {}
            }
        }
        ContextInput { bytes, regions: vec![AuxRegion { kernel_addr: PACKET_KERNEL_ADDR, bytes: packet.to_vec() }] }
    }

    pub fn field(&self, desc: &ContextDescriptor, name: &str) -> Option<u64> {
        let f = desc.fields.iter().find(|f| f.name == name)?;
        Some(read_le(&self.bytes[f.offset as usize..(f.offset + f.length) as usize]))
    }
}

/// Where the mirrored context and its regions live in the sandbox.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MirroredContext {
    pub base: u64,
    pub region_addrs: Vec<u64>,
}

pub fn mirror_context(
    sandbox: &mut Sandbox,
    desc: &ContextDescriptor,
    input: &ContextInput,
) -> Result<MirroredContext, ContextError> {
    desc.validate()?;
    if input.bytes.len() as u64 != desc.total_len {
        return Err(ContextError::LengthMismatch { expected: desc.total_len, got: input.bytes.len() as u64 });
    }
    let base = sandbox.context_base();
    let available = sandbox.layout().context_len;

    let mut cursor = (desc.total_len + 7) & !7;
    let mut region_offsets = Vec::with_capacity(input.regions.len());
    for r in &input.regions {
        region_offsets.push(cursor);
        cursor = (cursor + r.bytes.len() as u64 + 7) & !7;
    }
    let needed = input
        .regions
        .last()
        .map_or(desc.total_len, |r| region_offsets[region_offsets.len() - 1] + r.bytes.len() as u64);
    if needed > available {
        return Err(ContextError::ContextTooLarge { needed, available });
    }

    let mut ctx = input.bytes.clone();
    for f in desc.fields.iter().filter(|f| f.kind == FieldKind::RegionAddress) {
        let span = f.offset as usize..(f.offset + f.length) as usize;
        let value = read_le(&ctx[span.clone()]);
        if value == 0 {
            continue;
        }
        let (idx, region) = input
            .regions
            .iter()
            .enumerate()
            .find(|(_, r)| value >= r.kernel_addr && value - r.kernel_addr <= r.bytes.len() as u64)
            .ok_or_else(|| ContextError::DanglingPointer(f.name.clone()))?;
        if let Some(cap) = f.region_len {
            if region.bytes.len() as u64 > cap {
                return Err(ContextError::ContextTooLarge { needed: region.bytes.len() as u64, available: cap });
            }
        }
        let translated = base + region_offsets[idx] + (value - region.kernel_addr);
        if f.length < 8 && translated >> (8 * f.length) != 0 {
            return Err(ContextError::FieldTooNarrow { field: f.name.clone(), addr: translated });
        }
        write_le(&mut ctx[span], translated);
    }

    sandbox.write(base, &ctx).expect("context fits the context area");
    let mut region_addrs = Vec::with_capacity(input.regions.len());
    for (r, off) in input.regions.iter().zip(&region_offsets) {
        let addr = base + off;
        sandbox.write(addr, &r.bytes).expect("region fits the context area");
        region_addrs.push(addr);
    }

    let entry = |length| MirrorEntry {
        kind: MirrorKind::ContextField,
        kernel_ref: KernelRef::Context,
        length,
        state: MirrorState::Live,
    };
    if desc.total_len > 0 {
        sandbox.metadata.mirror_map.insert(base, entry(desc.total_len));
    }
    for (r, &addr) in input.regions.iter().zip(&region_addrs) {
        if !r.bytes.is_empty() {
            sandbox.metadata.mirror_map.insert(addr, entry(r.bytes.len() as u64));
        }
    }
    Ok(MirroredContext { base, region_addrs })
}

/// Copy writable fields and regions back out of the sandbox. Address fields
/// keep their original values.
pub fn sync_context(
    sandbox: &Sandbox,
    desc: &ContextDescriptor,
    original: &ContextInput,
    mirrored: &MirroredContext,
) -> ContextInput {
    let mut out = original.clone();
    let mirror = sandbox.read(mirrored.base, desc.total_len as usize).unwrap_or(&[]);
    for f in desc.fields.iter().filter(|f| f.writable && f.kind == FieldKind::Scalar) {
        let span = f.offset as usize..(f.offset + f.length) as usize;
        if let Some(src) = mirror.get(span.clone()) {
            out.bytes[span].copy_from_slice(src);
        }
    }

    let mut writable_regions = vec![false; original.regions.len()];
    for f in desc.fields.iter().filter(|f| f.writable && f.kind == FieldKind::RegionAddress) {
        let value = read_le(&original.bytes[f.offset as usize..(f.offset + f.length) as usize]);
        if let Some(i) = original
            .regions
            .iter()
            .position(|r| value >= r.kernel_addr && value - r.kernel_addr <= r.bytes.len() as u64)
        {
            writable_regions[i] = true;
        }
    }
    for (i, region) in out.regions.iter_mut().enumerate() {
        if writable_regions[i] {
            if let Some(src) = sandbox.read(mirrored.region_addrs[i], region.bytes.len()) {
                region.bytes.copy_from_slice(src);
            }
        }
    }
    out
}
