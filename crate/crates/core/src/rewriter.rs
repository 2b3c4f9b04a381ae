// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Binary rewriting pass.
//!
//! Every load and store is expanded into a masking sequence that computes
//! the effective address into `r11`, confines it with the sandbox masks and
//! then performs the access through `[r11+0]`:
//!
//! ```text
//! mov64 r11, rb
//! add64 r11, off
//! lddw  r12, and_mask
//! and64 r11, r12
//! lddw  r12, or_mask
//! or64  r11, r12
//! <access through [r11+0]>
//! ```
//!
//! Helper calls are turned into guarded calls, routed through the trampoline
//! at run time. Jump offsets are then recomputed against the new layout.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::*;
use crate::sandbox::AddressMasks;

/// Output slots emitted for one memory access.
pub const MASK_SEQUENCE_SLOTS: usize = 9;
/// Net growth in bytes for each instrumented access.
pub const BYTES_PER_MASK_CHECK: usize = (MASK_SEQUENCE_SLOTS - 1) * INSN_SIZE;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error("input already uses instrumentation-reserved state at slot {0}")]
    AlreadyInstrumented(usize),
    #[error("rewritten jump at input slot {slot} needs offset {offset}, beyond 16 bits")]
    OffsetOverflow { slot: usize, offset: i64 },
    #[error("jump at input slot {slot} targets slot {target}, not an instruction boundary")]
    InvalidJumpTarget { slot: usize, target: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectedStats {
    pub mask_checks: u64,
    pub trampoline_checks: u64,
    pub original_bytes: u64,
    pub instrumented_bytes: u64,
    pub growth_percent: f64,
}

impl InjectedStats {
    fn new(mask_checks: u64, trampoline_checks: u64, original_bytes: u64) -> Self {
        let instrumented_bytes = original_bytes + BYTES_PER_MASK_CHECK as u64 * mask_checks;
        InjectedStats {
            mask_checks,
            trampoline_checks,
            original_bytes,
            instrumented_bytes,
            growth_percent: growth_percent(original_bytes, instrumented_bytes),
        }
    }
}

pub fn growth_percent(original: u64, instrumented: u64) -> f64 {
    if original == 0 {
        0.0
    } else {
        100.0 * (instrumented as f64 - original as f64) / original as f64
    }
}

/// Output of [`instrument`]. Only the rewriter constructs these, so the
/// executor may rely on the masking invariants holding.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentedProgram {
    instructions: Vec<Instruction>,
    origin_map: Vec<usize>,
    injected: InjectedStats,
    masks: AddressMasks,
    program_type: ProgramType,
    name: String,
}

impl InstrumentedProgram {
    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    /// For each output slot, the input slot it was derived from.
    pub fn origin_map(&self) -> &[usize] {
        &self.origin_map
    }

    pub fn injected(&self) -> &InjectedStats {
        &self.injected
    }

    /// Mask constants embedded in the emitted wide loads.
    pub fn masks(&self) -> AddressMasks {
        self.masks
    }

    pub fn program_type(&self) -> ProgramType {
        self.program_type
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn slot_count(&self) -> usize {
        self.origin_map.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.instructions).expect("rewriter output is always encodable")
    }
}

pub fn instrument(program: &Program, masks: &AddressMasks) -> Result<InstrumentedProgram, RewriteError> {
    let input = &program.instructions;
    let in_starts = slot_starts(input);
    let in_slots = slot_count(input);

    // First output slot of every input slot boundary, plus one past the end.
    let mut out_pos = vec![usize::MAX; in_slots + 1];
    let mut pos = 0;
    for (insn, &s) in input.iter().zip(&in_starts) {
        if insn.registers().any(|r| r > MAX_USER_REG) || insn.opc == GUARDED_CALL {
            return Err(RewriteError::AlreadyInstrumented(s));
        }
        out_pos[s] = pos;
        pos += if insn.is_memory_access() { MASK_SEQUENCE_SLOTS } else { insn.slots() };
    }
    out_pos[in_slots] = pos;

    let mut out = Vec::with_capacity(input.len() + 7 * input.len() / 2);
    let mut origin_map = Vec::with_capacity(pos);
    let (mut mask_checks, mut trampoline_checks) = (0u64, 0u64);

    for (insn, &s) in input.iter().zip(&in_starts) {
        let before = out.len();
        if let Some(base) = insn.mem_base_reg() {
            mask_checks += 1;
            out.push(Instruction::mov64_reg(SCRATCH_ADDR, base));
            out.push(Instruction::new(ADD64_IMM, SCRATCH_ADDR, 0, 0, insn.off as i32));
            out.push(Instruction::lddw(SCRATCH_MASK, masks.and_mask as i64));
            out.push(Instruction::new(AND64_REG, SCRATCH_ADDR, SCRATCH_MASK, 0, 0));
            out.push(Instruction::lddw(SCRATCH_MASK, masks.or_mask as i64));
            out.push(Instruction::new(OR64_REG, SCRATCH_ADDR, SCRATCH_MASK, 0, 0));
            let mut access = *insn;
            access.off = 0;
            if insn.class() == BPF_LDX {
                access.src = SCRATCH_ADDR;
            } else {
                access.dst = SCRATCH_ADDR;
            }
            out.push(access);
        } else if insn.opc == CALL {
            trampoline_checks += 1;
            out.push(Instruction::new(GUARDED_CALL, 0, 0, 0, insn.imm));
        } else if insn.is_jump() {
            let target = s as i64 + 1 + insn.off as i64;
            let mapped = usize::try_from(target)
                .ok()
                .and_then(|t| out_pos.get(t).copied())
                .filter(|&p| p != usize::MAX)
                .ok_or(RewriteError::InvalidJumpTarget { slot: s, target })?;
            let offset = mapped as i64 - out_pos[s] as i64 - 1;
            let mut j = *insn;
            j.off = i16::try_from(offset).map_err(|_| RewriteError::OffsetOverflow { slot: s, offset })?;
            out.push(j);
        } else {
            out.push(*insn);
        }
        let emitted: usize = out[before..].iter().map(Instruction::slots).sum();
        origin_map.extend(std::iter::repeat_n(s, emitted));
    }

    let original_bytes = (in_slots * INSN_SIZE) as u64;
    Ok(InstrumentedProgram {
        instructions: out,
        origin_map,
        injected: InjectedStats::new(mask_checks, trampoline_checks, original_bytes),
        masks: *masks,
        program_type: program.program_type,
        name: program.name.clone(),
    })
}

/// Human-readable size and check summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeReport<'a>(pub &'a InjectedStats);

impl fmt::Display for SizeReport<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.0;
        writeln!(f, "address-masking checks: {}", s.mask_checks)?;
        writeln!(f, "trampoline checks:      {}", s.trampoline_checks)?;
        writeln!(f, "original size:          {} bytes", s.original_bytes)?;
        writeln!(f, "instrumented size:      {} bytes", s.instrumented_bytes)?;
        write!(f, "growth:                 {:.1}%", s.growth_percent)
    }
}

pub fn size_report(injected: &InjectedStats) -> String {
    SizeReport(injected).to_string()
}

pub fn stats_json(injected: &InjectedStats) -> serde_json::Value {
    serde_json::to_value(injected).expect("stats serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_asm;
    use crate::loader::precheck_instrumented;
    use crate::sandbox::compute_masks;

    fn masks() -> AddressMasks {
        compute_masks(0xDEAD_B000, 4096).unwrap()
    }

    fn prog(src: &str) -> Program {
        Program::new("t", ProgramType::Xdp, parse_asm(src).unwrap())
    }

    #[test]
    fn load_call_exit() {
        let ip = instrument(&prog("ldxdw r0, [r1+8]\ncall 1\nexit"), &masks()).unwrap();
        assert_eq!(ip.slot_count(), 11);
        let s = ip.injected();
        assert_eq!((s.mask_checks, s.trampoline_checks), (1, 1));
        assert_eq!((s.original_bytes, s.instrumented_bytes), (24, 88));
        assert_eq!(ip.to_bytes().len(), 88);
        let expected = parse_asm(
            "mov64 r11, r1\nadd64 r11, 8\nlddw r12, 0xfff\nand64 r11, r12\nlddw r12, 0xdeadb000\n\
             or64 r11, r12\nldxdw r0, [r11+0]\ngcall 1\nexit",
        )
        .unwrap();
        assert_eq!(ip.instructions(), &expected[..]);
        assert_eq!(ip.origin_map(), &[0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 2]);
    }

    #[test]
    fn nothing_to_instrument() {
        let p = prog("mov64 r0, 0\nexit");
        let ip = instrument(&p, &masks()).unwrap();
        assert_eq!(ip.instructions(), &p.instructions[..]);
        assert_eq!((ip.injected().mask_checks, ip.injected().trampoline_checks), (0, 0));
        assert_eq!(ip.injected().growth_percent, 0.0);
    }

    #[test]
    fn jump_over_store_is_fixed_up() {
        let ip = instrument(&prog("jeq r1, 0, +1\nstxdw [r10-8], r2\nexit"), &masks()).unwrap();
        assert_eq!(ip.instructions()[0].off, 9);
        // the stored-through instruction addresses [r11+0] with r2 as value
        let store = ip.instructions()[7];
        assert_eq!((store.opc, store.dst, store.src, store.off), (STX_DW, SCRATCH_ADDR, 2, 0));
    }

    #[test]
    fn backward_jump_lands_on_sequence_start() {
        let src = "mov64 r0, 0\ntop: ldxb r2, [r10-1]\nadd64 r0, 1\njlt r0, 3, top\nexit";
        let ip = instrument(&prog(src), &masks()).unwrap();
        let j = ip.instructions().iter().position(|i| i.opc == (BPF_JMP | BPF_JLT)).unwrap();
        let starts = slot_starts(ip.instructions());
        let target = starts[j] as i64 + 1 + ip.instructions()[j].off as i64;
        assert_eq!(target, 1);
        assert!(precheck_instrumented(ip.instructions(), true).accepted);
    }

    #[test]
    fn rejects_reserved_input() {
        assert_eq!(instrument(&prog("mov64 r11, 0\nexit"), &masks()), Err(RewriteError::AlreadyInstrumented(0)));
        assert_eq!(instrument(&prog("gcall 1\nexit"), &masks()), Err(RewriteError::AlreadyInstrumented(0)));
    }

    #[test]
    fn offset_overflow() {
        // 4000 stores between a jump and its target: 4000 * 9 slots > i16::MAX
        let mut src = String::from("jeq r1, 0, end\n");
        for _ in 0..4000 {
            src.push_str("stb [r10-1], 0\n");
        }
        src.push_str("end: exit\n");
        assert!(matches!(instrument(&prog(&src), &masks()), Err(RewriteError::OffsetOverflow { slot: 0, .. })));
    }

    #[test]
    fn size_report_arithmetic() {
        let s = InjectedStats::new(1, 1, 24);
        assert_eq!(s.instrumented_bytes, 88);
        assert!((s.growth_percent - 266.666_666).abs() < 1e-3);
        assert!(size_report(&s).contains("266.7%"));
        let z = InjectedStats::new(0, 3, 16);
        assert_eq!(z.growth_percent, 0.0);
        assert!(size_report(&z).contains("0.0%"));
        let j = stats_json(&s);
        for k in ["mask_checks", "trampoline_checks", "original_bytes", "instrumented_bytes", "growth_percent"] {
            assert!(j.get(k).is_some(), "{k}");
        }
    }
}
