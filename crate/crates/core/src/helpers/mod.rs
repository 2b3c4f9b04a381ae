// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Helper registry and the built-in helpers.
//!
//! Helpers never hand the program an address outside the sandbox: kernel
//! objects are reached through heap copies tracked in the sandbox's mirror
//! map. Pointer arguments naming program buffers are masked into the
//! sandbox before use.

pub mod context;
pub mod map;
pub mod ringbuf;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::executor::Trap;
use crate::kernel::KernelObjects;
use crate::sandbox::Sandbox;

pub use context::{
    mirror_context, sync_context, Anchor, AuxRegion, ContextDescriptor, ContextError, ContextField, ContextInput,
    FieldKind, MirroredContext, PACKET_KERNEL_ADDR,
};
pub use map::{map_lookup, map_sync, map_update, ArrayMap};
pub use ringbuf::{ringbuf_commit, ringbuf_discard, ringbuf_reserve, KernelRingBuffer, RingCheckpoint};

pub const BPF_MAP_LOOKUP_ELEM: u32 = 1;
pub const BPF_MAP_UPDATE_ELEM: u32 = 2;
pub const BPF_GET_CURRENT_TASK: u32 = 35;
pub const BPF_RINGBUF_RESERVE: u32 = 131;
pub const BPF_RINGBUF_SUBMIT: u32 = 132;
pub const BPF_RINGBUF_DISCARD: u32 = 133;

/// Opaque value returned by the `get_current_task` stub. Not an address.
pub const CURRENT_TASK_TOKEN: u64 = 0x7a5c_0000_0000_0001;

/// What a helper may touch while it runs.
pub struct HelperCtx<'a> {
    pub sandbox: &'a mut Sandbox,
    pub kernel: &'a mut KernelObjects,
}

pub type HelperFn = Arc<dyn Fn(&mut HelperCtx<'_>, [u64; 5]) -> Result<u64, Trap> + Send + Sync>;

#[derive(Clone)]
pub struct Helper {
    pub name: String,
    pub arg_count: u8,
    func: HelperFn,
}

impl Helper {
    pub fn call(&self, ctx: &mut HelperCtx<'_>, args: [u64; 5]) -> Result<u64, Trap> {
        (self.func)(ctx, args)
    }
}

impl fmt::Debug for Helper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Helper").field("name", &self.name).field("arg_count", &self.arg_count).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("helper id {0} is already registered")]
    Duplicate(u32),
}

/// Helper id to implementation. Shared immutably once capability tables
/// have been built from it.
#[derive(Debug, Clone, Default)]
pub struct HelperRegistry {
    helpers: BTreeMap<u32, Helper>,
}

impl HelperRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, id: u32, name: &str, arg_count: u8, func: F) -> Result<(), RegistryError>
    where
        F: Fn(&mut HelperCtx<'_>, [u64; 5]) -> Result<u64, Trap> + Send + Sync + 'static,
    {
        if self.helpers.contains_key(&id) {
            return Err(RegistryError::Duplicate(id));
        }
        self.helpers.insert(id, Helper { name: name.to_string(), arg_count, func: Arc::new(func) });
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&Helper> {
        self.helpers.get(&id)
    }

    pub fn contains(&self, id: u32) -> bool {
        self.helpers.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.helpers.keys().copied()
    }

    /// The built-in helper set.
    pub fn with_defaults() -> Self {
        let mut r = HelperRegistry::new();
        r.register(BPF_MAP_LOOKUP_ELEM, "map_lookup_elem", 2, |cx, a| {
            let key_addr = cx.sandbox.masks().apply(a[1]);
            let Some(key) = cx.sandbox.read(key_addr, 4) else { return Ok(0) };
            let key = u32::from_le_bytes(key.try_into().expect("4 bytes"));
            Ok(map_lookup(cx.sandbox, &cx.kernel.maps, a[0] as usize, key))
        })
        .expect("fresh registry");
        r.register(BPF_MAP_UPDATE_ELEM, "map_update_elem", 4, |cx, a| {
            let masks = cx.sandbox.masks();
            let Some(key) = cx.sandbox.read(masks.apply(a[1]), 4) else { return Ok(-map::EINVAL as u64) };
            let key = u32::from_le_bytes(key.try_into().expect("4 bytes"));
            Ok(map_update(cx.sandbox, &cx.kernel.maps, a[0] as usize, key, masks.apply(a[2])) as u64)
        })
        .expect("fresh registry");
        r.register(BPF_GET_CURRENT_TASK, "get_current_task", 0, |_, _| Ok(CURRENT_TASK_TOKEN)).expect("fresh registry");
        r.register(BPF_RINGBUF_RESERVE, "ringbuf_reserve", 3, |cx, a| {
            if a[2] != 0 {
                return Ok(0);
            }
            Ok(ringbuf_reserve(cx.sandbox, &mut cx.kernel.ringbufs, a[0] as usize, a[1]))
        })
        .expect("fresh registry");
        r.register(BPF_RINGBUF_SUBMIT, "ringbuf_submit", 2, |cx, a| {
            ringbuf_commit(cx.sandbox, &mut cx.kernel.ringbufs, a[0]).map(|()| 0)
        })
        .expect("fresh registry");
        r.register(BPF_RINGBUF_DISCARD, "ringbuf_discard", 2, |cx, a| {
            ringbuf_discard(cx.sandbox, &mut cx.kernel.ringbufs, a[0]).map(|()| 0)
        })
        .expect("fresh registry");
        r
    }
}
