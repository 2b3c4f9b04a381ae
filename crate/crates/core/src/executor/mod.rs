// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Interpreter for instrumented (and, for comparison, raw) programs.
//!
//! All memory, sandbox and kernel alike, lives in one flat address space;
//! the interpreter resolves every access the same way in both modes. In
//! sandboxed mode confinement comes entirely from the rewriter's masking
//! sequences and the trampoline, never from the interpreter itself.

mod cost;

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::cfi::{self, CapabilityTable};
use crate::helpers::{
    map_sync, mirror_context, sync_context, ContextDescriptor, ContextError, ContextInput, HelperCtx, HelperRegistry,
};
use crate::isa::*;
use crate::kernel::KernelObjects;
use crate::rewriter::InstrumentedProgram;
use crate::sandbox::{ConfinementEvent, ExecutedCounters, Sandbox};

pub use cost::{account, calibrate, CalibrationError, CostModel, OverheadBreakdown};

pub const DEFAULT_BUDGET: u64 = 1_000_000;

/// Why an execution stopped early. Traps never leave partial effects on
/// ring buffers, maps or the original context.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
pub enum Trap {
    #[error("CfiViolation: helper {helper_id} is not permitted")]
    CfiViolation { helper_id: u32 },
    #[error("BudgetExhausted")]
    BudgetExhausted,
    #[error("InvalidReservation: {address:#x} is not a live reservation")]
    InvalidReservation { address: u64 },
    #[error("IllegalInstruction at slot {slot}: {detail}")]
    IllegalInstruction { slot: usize, detail: String },
    /// Access to unmapped memory. Only reachable in raw mode.
    #[error("MemoryFault: {len}-byte access at {address:#x}")]
    MemoryFault { address: u64, len: usize },
}

impl Trap {
    pub fn name(&self) -> &'static str {
        match self {
            Trap::CfiViolation { .. } => "CfiViolation",
            Trap::BudgetExhausted => "BudgetExhausted",
            Trap::InvalidReservation { .. } => "InvalidReservation",
            Trap::IllegalInstruction { .. } => "IllegalInstruction",
            Trap::MemoryFault { .. } => "MemoryFault",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sandboxed,
    /// No masking, no capability checks. For demonstrations and
    /// differential testing only.
    Raw,
}

#[derive(Debug, Clone, Copy)]
pub enum Executable<'a> {
    Instrumented(&'a InstrumentedProgram),
    Raw(&'a Program),
}

impl<'a> Executable<'a> {
    fn instructions(&self) -> &'a [Instruction] {
        match self {
            Executable::Instrumented(p) => p.instructions(),
            Executable::Raw(p) => &p.instructions,
        }
    }

    fn program_type(&self) -> ProgramType {
        match self {
            Executable::Instrumented(p) => p.program_type(),
            Executable::Raw(p) => p.program_type,
        }
    }

    fn origin(&self, slot: usize) -> usize {
        match self {
            Executable::Instrumented(p) => p.origin_map().get(slot).copied().unwrap_or(slot),
            Executable::Raw(_) => slot,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("sandboxed mode requires an instrumented program")]
    NotInstrumented,
    #[error("program was instrumented for a different sandbox (masks differ)")]
    MaskMismatch,
    #[error(transparent)]
    Context(#[from] ContextError),
}

/// Helper registry plus the capability table built from it. Immutable and
/// shareable across concurrent executions.
#[derive(Debug, Clone)]
pub struct Runtime {
    pub registry: Arc<HelperRegistry>,
    pub table: Arc<CapabilityTable>,
}

impl Runtime {
    pub fn new(registry: HelperRegistry, table: CapabilityTable) -> Self {
        Runtime { registry: Arc::new(registry), table: Arc::new(table) }
    }

    /// Built-in helpers under the default policy.
    pub fn standard() -> Self {
        let registry = HelperRegistry::with_defaults();
        let table = cfi::build_capability_table(&cfi::Policy::default_policy(), &registry)
            .expect("default policy is consistent");
        Runtime::new(registry, table)
    }
}

#[derive(Debug, Clone)]
pub struct ExecOptions {
    pub mode: Mode,
    pub budget: u64,
    pub descriptor: ContextDescriptor,
    pub cost_model: CostModel,
    pub detect: bool,
    pub trace: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            mode: Mode::Sandboxed,
            budget: DEFAULT_BUDGET,
            descriptor: ContextDescriptor::empty(),
            cost_model: CostModel::default(),
            detect: false,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Returned(u64),
    Trap(Trap),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub slot: usize,
    pub origin_slot: usize,
    pub mnemonic: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    pub counters: ExecutedCounters,
    pub breakdown: OverheadBreakdown,
    /// Context after write-back; `None` when the run trapped.
    pub context_out: Option<ContextInput>,
    pub confinement_events: Vec<ConfinementEvent>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceEntry>,
}

impl ExecutionResult {
    pub fn returned(&self) -> Option<u64> {
        match self.status {
            ExecStatus::Returned(v) => Some(v),
            ExecStatus::Trap(_) => None,
        }
    }

    pub fn trap(&self) -> Option<&Trap> {
        match &self.status {
            ExecStatus::Trap(t) => Some(t),
            ExecStatus::Returned(_) => None,
        }
    }
}

/// Run `exe` once in a freshly reset `sandbox`.
pub fn execute(
    exe: Executable<'_>,
    sandbox: &mut Sandbox,
    kernel: &mut KernelObjects,
    input: &ContextInput,
    runtime: &Runtime,
    opts: &ExecOptions,
) -> Result<ExecutionResult, ExecError> {
    match (opts.mode, exe) {
        (Mode::Sandboxed, Executable::Raw(_)) => return Err(ExecError::NotInstrumented),
        (_, Executable::Instrumented(p)) if p.masks() != sandbox.masks() => return Err(ExecError::MaskMismatch),
        _ => {}
    }

    sandbox.reset();
    sandbox.metadata.detect_mode = opts.detect;
    let mirrored = mirror_context(sandbox, &opts.descriptor, input)?;
    let checkpoint = kernel.checkpoint();

    let mut trace = Vec::new();
    let status = {
        let mut vm = Vm {
            exe,
            insns: exe.instructions(),
            sandbox: &mut *sandbox,
            kernel: &mut *kernel,
            runtime,
            mode: opts.mode,
            budget: opts.budget,
            trace: opts.trace.then_some(&mut trace),
        };
        vm.run(mirrored.base)
    };

    let context_out = match status {
        ExecStatus::Returned(_) => {
            map_sync(sandbox, &mut kernel.maps);
            Some(sync_context(sandbox, &opts.descriptor, input, &mirrored))
        }
        ExecStatus::Trap(_) => {
            kernel.rollback(&checkpoint);
            None
        }
    };

    let counters = sandbox.metadata.counters;
    Ok(ExecutionResult {
        status,
        counters,
        breakdown: account(&counters, &opts.cost_model),
        context_out,
        confinement_events: sandbox.metadata.confinement_events.clone(),
        trace,
    })
}

struct Vm<'a, 'b> {
    exe: Executable<'a>,
    insns: &'a [Instruction],
    sandbox: &'b mut Sandbox,
    kernel: &'b mut KernelObjects,
    runtime: &'b Runtime,
    mode: Mode,
    budget: u64,
    trace: Option<&'b mut Vec<TraceEntry>>,
}

fn illegal(slot: usize, detail: impl Into<String>) -> Trap {
    Trap::IllegalInstruction { slot, detail: detail.into() }
}

impl Vm<'_, '_> {
    fn load(&self, addr: u64, len: usize) -> Result<u64, Trap> {
        let bytes = self
            .sandbox
            .read(addr, len)
            .or_else(|| self.kernel.memory.read(addr, len))
            .ok_or(Trap::MemoryFault { address: addr, len })?;
        let mut b = [0u8; 8];
        b[..len].copy_from_slice(bytes);
        Ok(u64::from_le_bytes(b))
    }

    fn store(&mut self, addr: u64, len: usize, value: u64) -> Result<(), Trap> {
        let bytes = &value.to_le_bytes()[..len];
        if self.sandbox.write(addr, bytes).is_some() || self.kernel.memory.write(addr, bytes).is_some() {
            Ok(())
        } else {
            Err(Trap::MemoryFault { address: addr, len })
        }
    }

    fn run(&mut self, ctx_base: u64) -> ExecStatus {
        match self.interpret(ctx_base) {
            Ok(v) => ExecStatus::Returned(v),
            Err(t) => ExecStatus::Trap(t),
        }
    }

    fn interpret(&mut self, ctx_base: u64) -> Result<u64, Trap> {
        let insns = self.insns;
        let starts = slot_starts(insns);
        let total_slots = slot_count(insns);
        let mut at_slot = vec![usize::MAX; total_slots];
        for (i, &s) in starts.iter().enumerate() {
            at_slot[s] = i;
        }

        let mut reg = [0u64; NUM_REGS];
        reg[1] = ctx_base;
        reg[FRAME_REG as usize] = self.sandbox.stack_top();

        // Value of r11 entering the most recent `and64 r11, r12`.
        let mut mask_input: Option<u64> = None;
        let mut pc = 0usize;

        loop {
            let Some(insn) = insns.get(pc).copied() else {
                return Err(illegal(total_slots, "execution ran past the last instruction"));
            };
            let slot = starts[pc];
            if self.sandbox.metadata.counters.instructions_retired >= self.budget {
                return Err(Trap::BudgetExhausted);
            }
            self.sandbox.metadata.counters.instructions_retired += 1;
            if let Some(t) = self.trace.as_deref_mut() {
                t.push(TraceEntry { slot, origin_slot: self.exe.origin(slot), mnemonic: insn.to_string() });
            }
            // Only the wide load of the or-mask may sit between and/or.
            let pending_mask =
                if insn.opc == LD_DW_IMM && insn.dst == SCRATCH_MASK { mask_input } else { mask_input.take() };

            let dst = insn.dst as usize;
            let src = insn.src as usize;
            let mut next = pc + 1;
            let op = insn.opc & OP_MASK;
            match insn.class() {
                BPF_ALU64 => {
                    if insn.opc == AND64_REG && insn.dst == SCRATCH_ADDR && insn.src == SCRATCH_MASK {
                        mask_input = Some(reg[dst]);
                    }
                    let operand = if insn.opc & SRC_MASK == BPF_X { reg[src] } else { insn.imm as i64 as u64 };
                    reg[dst] = alu64(op, reg[dst], operand);
                    if insn.opc == OR64_REG && insn.dst == SCRATCH_ADDR && insn.src == SCRATCH_MASK {
                        if let Some(original) = pending_mask {
                            self.sandbox.metadata.counters.mask_executed += 1;
                            let origin = self.exe.origin(slot);
                            self.sandbox.record_confinement(origin, original, reg[dst]);
                        }
                    }
                }
                BPF_ALU => {
                    let operand = if insn.opc & SRC_MASK == BPF_X { reg[src] as u32 } else { insn.imm as u32 };
                    reg[dst] = alu32(op, reg[dst] as u32, operand) as u64;
                }
                BPF_LD if insn.opc == LD_DW_IMM => {
                    reg[dst] = insn.wide.unwrap_or(insn.imm as i64) as u64;
                }
                BPF_LDX | BPF_ST | BPF_STX if insn.opc & MODE_MASK == BPF_MEM => {
                    let width = insn.access_width().expect("memory access");
                    let base = insn.mem_base_reg().expect("memory access") as usize;
                    let addr = reg[base].wrapping_add(insn.off as i64 as u64);
                    match insn.class() {
                        BPF_LDX => reg[dst] = self.load(addr, width)?,
                        BPF_ST => self.store(addr, width, insn.imm as i64 as u64)?,
                        _ => self.store(addr, width, reg[src])?,
                    }
                }
                BPF_JMP | BPF_JMP32 => match insn.opc {
                    EXIT => return Ok(reg[0]),
                    CALL | GUARDED_CALL => {
                        let id = insn.imm as u32;
                        let args = [reg[1], reg[2], reg[3], reg[4], reg[5]];
                        let mut cx = HelperCtx { sandbox: &mut *self.sandbox, kernel: &mut *self.kernel };
                        reg[0] = if insn.opc == GUARDED_CALL {
                            cfi::dispatch(
                                &self.runtime.table,
                                &self.runtime.registry,
                                self.exe.program_type(),
                                id,
                                args,
                                &mut cx,
                            )?
                        } else if self.mode == Mode::Raw {
                            let helper = self
                                .runtime
                                .registry
                                .get(id)
                                .ok_or_else(|| illegal(slot, format!("unknown helper {id}")))?;
                            helper.call(&mut cx, args)?
                        } else {
                            return Err(illegal(slot, "unguarded call in sandboxed mode"));
                        };
                    }
                    _ => {
                        let taken = if insn.opc == JA {
                            true
                        } else if insn.class() == BPF_JMP {
                            let rhs = if insn.opc & SRC_MASK == BPF_X { reg[src] } else { insn.imm as i64 as u64 };
                            cond64(op, reg[dst], rhs)
                        } else {
                            let rhs = if insn.opc & SRC_MASK == BPF_X { reg[src] as u32 } else { insn.imm as u32 };
                            cond32(op, reg[dst] as u32, rhs)
                        };
                        if taken {
                            let target = slot as i64 + 1 + insn.off as i64;
                            next = usize::try_from(target)
                                .ok()
                                .and_then(|t| at_slot.get(t).copied())
                                .filter(|&i| i != usize::MAX)
                                .ok_or_else(|| illegal(slot, format!("jump to invalid slot {target}")))?;
                        }
                    }
                },
                _ => return Err(illegal(slot, format!("opcode {:#04x}", insn.opc))),
            }
            pc = next;
        }
    }
}

fn alu64(op: u8, dst: u64, src: u64) -> u64 {
    match op {
        BPF_ADD => dst.wrapping_add(src),
        BPF_SUB => dst.wrapping_sub(src),
        BPF_MUL => dst.wrapping_mul(src),
        BPF_DIV => dst.checked_div(src).unwrap_or(0),
        BPF_OR => dst | src,
        BPF_AND => dst & src,
        BPF_LSH => dst << (src & 63),
        BPF_RSH => dst >> (src & 63),
        BPF_NEG => dst.wrapping_neg(),
        BPF_MOD => dst.checked_rem(src).unwrap_or(dst),
        BPF_XOR => dst ^ src,
        BPF_MOV => src,
        BPF_ARSH => ((dst as i64) >> (src & 63)) as u64,
        _ => dst,
    }
}

fn alu32(op: u8, dst: u32, src: u32) -> u32 {
    match op {
        BPF_ADD => dst.wrapping_add(src),
        BPF_SUB => dst.wrapping_sub(src),
        BPF_MUL => dst.wrapping_mul(src),
        BPF_DIV => dst.checked_div(src).unwrap_or(0),
        BPF_OR => dst | src,
        BPF_AND => dst & src,
        BPF_LSH => dst << (src & 31),
        BPF_RSH => dst >> (src & 31),
        BPF_NEG => dst.wrapping_neg(),
        BPF_MOD => dst.checked_rem(src).unwrap_or(dst),
        BPF_XOR => dst ^ src,
        BPF_MOV => src,
        BPF_ARSH => ((dst as i32) >> (src & 31)) as u32,
        _ => dst,
    }
}

fn cond64(op: u8, a: u64, b: u64) -> bool {
    match op {
        BPF_JEQ => a == b,
        BPF_JNE => a != b,
        BPF_JGT => a > b,
        BPF_JGE => a >= b,
        BPF_JLT => a < b,
        BPF_JLE => a <= b,
        BPF_JSET => a & b != 0,
        BPF_JSGT => (a as i64) > (b as i64),
        BPF_JSGE => (a as i64) >= (b as i64),
        BPF_JSLT => (a as i64) < (b as i64),
        BPF_JSLE => (a as i64) <= (b as i64),
        _ => false,
    }
}

fn cond32(op: u8, a: u32, b: u32) -> bool {
    match op {
        BPF_JEQ => a == b,
        BPF_JNE => a != b,
        BPF_JGT => a > b,
        BPF_JGE => a >= b,
        BPF_JLT => a < b,
        BPF_JLE => a <= b,
        BPF_JSET => a & b != 0,
        BPF_JSGT => (a as i32) > (b as i32),
        BPF_JSGE => (a as i32) >= (b as i32),
        BPF_JSLT => (a as i32) < (b as i32),
        BPF_JSLE => (a as i32) <= (b as i32),
        _ => false,
    }
}
