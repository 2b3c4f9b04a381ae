// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Per-program-type helper capabilities and the trampoline every guarded
//! call goes through.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::Trap;
use crate::helpers::*;
use crate::isa::ProgramType;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CfiError {
    #[error("policy for {program_type} references unregistered helper {helper_id}")]
    UnknownHelper { program_type: ProgramType, helper_id: u32 },
    #[error("invalid policy file: {0}")]
    BadPolicy(String),
}

/// Allowed helper ids per program type, as written in a policy file:
/// `{"xdp": [1, 2, 131], "socket_filter": [...]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Policy(pub BTreeMap<ProgramType, BTreeSet<u32>>);

impl Policy {
    /// Shipped defaults. These are placeholders chosen for the bundled
    /// samples, not a statement of what the kernel permits.
    pub fn default_policy() -> Self {
        let common =
            [BPF_MAP_LOOKUP_ELEM, BPF_MAP_UPDATE_ELEM, BPF_RINGBUF_RESERVE, BPF_RINGBUF_SUBMIT, BPF_RINGBUF_DISCARD];
        let mut m = BTreeMap::new();
        m.insert(ProgramType::Xdp, common.into_iter().collect());
        m.insert(ProgramType::SocketFilter, common.into_iter().chain([BPF_GET_CURRENT_TASK]).collect());
        Policy(m)
    }

    pub fn from_json(text: &str) -> Result<Self, CfiError> {
        serde_json::from_str(text).map_err(|e| CfiError::BadPolicy(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }

    /// Every (type, helper) pair the policy allows.
    pub fn pairs(&self) -> impl Iterator<Item = (ProgramType, u32)> + '_ {
        self.0.iter().flat_map(|(t, ids)| ids.iter().map(move |&id| (*t, id)))
    }
}

/// Hash set of allowed (type, helper) pairs. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapabilityTable {
    allowed: HashSet<(ProgramType, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CallVerdict {
    pub allowed: bool,
    pub helper_id: u32,
}

pub fn build_capability_table(policy: &Policy, registry: &HelperRegistry) -> Result<CapabilityTable, CfiError> {
    let mut allowed = HashSet::new();
    for (program_type, helper_id) in policy.pairs() {
        if !registry.contains(helper_id) {
            return Err(CfiError::UnknownHelper { program_type, helper_id });
        }
        allowed.insert((program_type, helper_id));
    }
    Ok(CapabilityTable { allowed })
}

impl CapabilityTable {
    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }
}

#[inline]
pub fn check_call(table: &CapabilityTable, program_type: ProgramType, helper_id: u32) -> CallVerdict {
    CallVerdict { allowed: table.allowed.contains(&(program_type, helper_id)), helper_id }
}

/// The trampoline: validate the target, count the check, run the helper.
/// A denied target traps before anything else happens.
pub fn dispatch(
    table: &CapabilityTable,
    registry: &HelperRegistry,
    program_type: ProgramType,
    helper_id: u32,
    args: [u64; 5],
    ctx: &mut HelperCtx<'_>,
) -> Result<u64, Trap> {
    if !check_call(table, program_type, helper_id).allowed {
        return Err(Trap::CfiViolation { helper_id });
    }
    let helper = registry.get(helper_id).ok_or(Trap::CfiViolation { helper_id })?;
    ctx.sandbox.metadata.counters.trampoline_executed += 1;
    helper.call(ctx, args)
}
