// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Load-time structural checks: program size, jump bounds, reachability,
//! back edges, reserved registers and fall-through.
//!
//! Memory safety and helper-call validity are not checked here; the rewriter
//! and the trampoline enforce those at run time.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::isa::*;

/// Kernel's historic instruction limit for unprivileged programs.
pub const DEFAULT_MAX_INSNS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_instructions: usize,
    pub allow_back_edges: bool,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_instructions: DEFAULT_MAX_INSNS, allow_back_edges: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationCode {
    Empty,
    TooLarge,
    JumpOutOfBounds,
    JumpIntoWideLoad,
    Unreachable,
    BackEdge,
    ReservedRegister,
    ReservedOpcode,
    FallThrough,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub instruction_index: usize,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at slot {}: {}", self.code, self.instruction_index, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub accepted: bool,
    pub violations: Vec<Violation>,
}

impl CheckReport {
    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

/// Pre-check a user-authored program.
pub fn precheck(insns: &[Instruction], limits: &Limits) -> CheckReport {
    run_checks(insns, limits, false)
}

/// Pre-check rewriter output: scratch registers and guarded calls are allowed,
/// and the size limit does not apply.
pub fn precheck_instrumented(insns: &[Instruction], allow_back_edges: bool) -> CheckReport {
    let limits = Limits { max_instructions: usize::MAX, allow_back_edges };
    run_checks(insns, &limits, true)
}

fn run_checks(insns: &[Instruction], limits: &Limits, instrumented: bool) -> CheckReport {
    let mut violations = Vec::new();
    let mut push =
        |code, instruction_index, detail: String| violations.push(Violation { code, instruction_index, detail });

    let starts = slot_starts(insns);
    let slots = slot_count(insns);
    if insns.is_empty() {
        push(ViolationCode::Empty, 0, "program has no instructions".into());
    }
    if slots > limits.max_instructions {
        push(
            ViolationCode::TooLarge,
            0,
            format!("{slots} instructions exceed the limit of {}", limits.max_instructions),
        );
    }

    // slot -> instruction index, None for the second half of a wide load
    let mut at_slot: Vec<Option<usize>> = vec![None; slots];
    for (i, &s) in starts.iter().enumerate() {
        at_slot[s] = Some(i);
    }

    for (i, insn) in insns.iter().enumerate() {
        let slot = starts[i];
        if !instrumented {
            if let Some(r) = insn.registers().find(|&r| r > MAX_USER_REG) {
                push(ViolationCode::ReservedRegister, slot, format!("r{r} is reserved for instrumentation"));
            }
            if insn.opc == GUARDED_CALL {
                push(ViolationCode::ReservedOpcode, slot, "guarded call in untrusted input".into());
            }
        }
        if insn.is_jump() {
            let target = slot as i64 + 1 + insn.off as i64;
            if target < 0 || target >= slots as i64 {
                push(ViolationCode::JumpOutOfBounds, slot, format!("target {target} outside [0, {slots})"));
            } else if at_slot[target as usize].is_none() {
                push(
                    ViolationCode::JumpIntoWideLoad,
                    slot,
                    format!("target {target} is the second half of a wide load"),
                );
            } else if !limits.allow_back_edges && target as usize <= slot {
                push(ViolationCode::BackEdge, slot, format!("jump to {target} from {slot}"));
            }
        }
    }

    // Depth-first reachability from slot 0. Invalid edges were reported above
    // and are skipped here.
    if !insns.is_empty() {
        let mut seen = vec![false; insns.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            let insn = &insns[i];
            let slot = starts[i];
            let mut succ: Vec<usize> = Vec::with_capacity(2);
            let falls_through = !(insn.opc == EXIT || insn.opc == JA);
            if falls_through {
                let next = slot + insn.slots();
                if next >= slots {
                    push(ViolationCode::FallThrough, slot, "control falls off the end of the program".into());
                } else {
                    succ.push(next);
                }
            }
            if insn.is_jump() {
                let target = slot as i64 + 1 + insn.off as i64;
                if (0..slots as i64).contains(&target) {
                    succ.push(target as usize);
                }
            }
            for s in succ {
                if let Some(j) = at_slot[s] {
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        for (i, reached) in seen.iter().enumerate() {
            if !reached {
                push(ViolationCode::Unreachable, starts[i], "not reachable from the entry point".into());
            }
        }
    }

    violations.sort_by_key(|v| v.instruction_index);
    CheckReport { accepted: violations.is_empty(), violations }
}
