// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! eBPF instruction encoding: opcodes, decode/encode and classification.
//!
//! Instructions use the standard little-endian 8-byte slot layout:
//! `opcode:8 | dst:4 src:4 | offset:16 | imm:32`. The 64-bit immediate load
//! (`lddw`) spans two slots, the upper half of its immediate living in the
//! `imm` field of the second slot.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size of one instruction slot in bytes.
pub const INSN_SIZE: usize = 8;

/// Highest register index a user program may name (`r10`, the frame pointer).
pub const MAX_USER_REG: u8 = 10;
/// First scratch register reserved for instrumentation.
pub const SCRATCH_ADDR: u8 = 11;
/// Second scratch register reserved for instrumentation.
pub const SCRATCH_MASK: u8 = 12;
/// Registers r0..=r12.
pub const NUM_REGS: usize = 13;
/// Frame pointer.
pub const FRAME_REG: u8 = 10;

// Instruction classes.
pub const BPF_LD: u8 = 0x00;
pub const BPF_LDX: u8 = 0x01;
pub const BPF_ST: u8 = 0x02;
pub const BPF_STX: u8 = 0x03;
pub const BPF_ALU: u8 = 0x04;
pub const BPF_JMP: u8 = 0x05;
pub const BPF_JMP32: u8 = 0x06;
pub const BPF_ALU64: u8 = 0x07;

// Size modifiers.
pub const BPF_W: u8 = 0x00;
pub const BPF_H: u8 = 0x08;
pub const BPF_B: u8 = 0x10;
pub const BPF_DW: u8 = 0x18;

// Mode modifiers.
pub const BPF_IMM: u8 = 0x00;
pub const BPF_MEM: u8 = 0x60;

// Source operand.
pub const BPF_K: u8 = 0x00;
pub const BPF_X: u8 = 0x08;

// ALU operations.
pub const BPF_ADD: u8 = 0x00;
pub const BPF_SUB: u8 = 0x10;
pub const BPF_MUL: u8 = 0x20;
pub const BPF_DIV: u8 = 0x30;
pub const BPF_OR: u8 = 0x40;
pub const BPF_AND: u8 = 0x50;
pub const BPF_LSH: u8 = 0x60;
pub const BPF_RSH: u8 = 0x70;
pub const BPF_NEG: u8 = 0x80;
pub const BPF_MOD: u8 = 0x90;
pub const BPF_XOR: u8 = 0xa0;
pub const BPF_MOV: u8 = 0xb0;
pub const BPF_ARSH: u8 = 0xc0;

// Jump operations.
pub const BPF_JA: u8 = 0x00;
pub const BPF_JEQ: u8 = 0x10;
pub const BPF_JGT: u8 = 0x20;
pub const BPF_JGE: u8 = 0x30;
pub const BPF_JSET: u8 = 0x40;
pub const BPF_JNE: u8 = 0x50;
pub const BPF_JSGT: u8 = 0x60;
pub const BPF_JSGE: u8 = 0x70;
pub const BPF_CALL: u8 = 0x80;
pub const BPF_EXIT: u8 = 0x90;
pub const BPF_JLT: u8 = 0xa0;
pub const BPF_JLE: u8 = 0xb0;
pub const BPF_JSLT: u8 = 0xc0;
pub const BPF_JSLE: u8 = 0xd0;
/// Trampoline-routed helper call. Not part of the kernel ISA; only the
/// rewriter emits it.
pub const BPF_GCALL: u8 = 0xe0;

pub const CLASS_MASK: u8 = 0x07;
pub const OP_MASK: u8 = 0xf0;
pub const SRC_MASK: u8 = 0x08;
pub const SIZE_MASK: u8 = 0x18;
pub const MODE_MASK: u8 = 0xe0;

// Full opcodes used by name throughout the crate.
pub const LD_DW_IMM: u8 = BPF_LD | BPF_IMM | BPF_DW;
pub const LDX_W: u8 = BPF_LDX | BPF_MEM | BPF_W;
pub const LDX_H: u8 = BPF_LDX | BPF_MEM | BPF_H;
pub const LDX_B: u8 = BPF_LDX | BPF_MEM | BPF_B;
pub const LDX_DW: u8 = BPF_LDX | BPF_MEM | BPF_DW;
pub const ST_W: u8 = BPF_ST | BPF_MEM | BPF_W;
pub const ST_H: u8 = BPF_ST | BPF_MEM | BPF_H;
pub const ST_B: u8 = BPF_ST | BPF_MEM | BPF_B;
pub const ST_DW: u8 = BPF_ST | BPF_MEM | BPF_DW;
pub const STX_W: u8 = BPF_STX | BPF_MEM | BPF_W;
pub const STX_H: u8 = BPF_STX | BPF_MEM | BPF_H;
pub const STX_B: u8 = BPF_STX | BPF_MEM | BPF_B;
pub const STX_DW: u8 = BPF_STX | BPF_MEM | BPF_DW;
pub const MOV64_IMM: u8 = BPF_ALU64 | BPF_K | BPF_MOV;
pub const MOV64_REG: u8 = BPF_ALU64 | BPF_X | BPF_MOV;
pub const ADD64_IMM: u8 = BPF_ALU64 | BPF_K | BPF_ADD;
pub const AND64_REG: u8 = BPF_ALU64 | BPF_X | BPF_AND;
pub const OR64_REG: u8 = BPF_ALU64 | BPF_X | BPF_OR;
pub const JA: u8 = BPF_JMP | BPF_JA;
pub const CALL: u8 = BPF_JMP | BPF_CALL;
pub const GUARDED_CALL: u8 = BPF_JMP | BPF_GCALL;
pub const EXIT: u8 = BPF_JMP | BPF_EXIT;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated program: {0}")]
    TruncatedProgram(String),
    #[error("unknown opcode {opcode:#04x} at slot {slot}")]
    UnknownOpcode { opcode: u8, slot: usize },
    #[error("invalid register r{reg} at slot {slot}")]
    InvalidRegister { reg: u8, slot: usize },
    #[error("malformed second slot of wide load at slot {slot}")]
    InvalidWideLoad { slot: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("instruction {index}: {detail}")]
    RangeError { index: usize, detail: String },
}

/// Coarse instruction kind used by the rewriter and the pre-checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionClass {
    Alu,
    Load,
    Store,
    Jump,
    Call,
    Exit,
    LoadImm64,
}

/// Attachment type of a program; selects its helper capabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramType {
    SocketFilter,
    Kprobe,
    Xdp,
}

impl ProgramType {
    pub const ALL: [ProgramType; 3] = [ProgramType::SocketFilter, ProgramType::Kprobe, ProgramType::Xdp];

    pub fn name(self) -> &'static str {
        match self {
            ProgramType::SocketFilter => "socket_filter",
            ProgramType::Kprobe => "kprobe",
            ProgramType::Xdp => "xdp",
        }
    }
}

impl fmt::Display for ProgramType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProgramType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProgramType::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown program type `{s}`"))
    }
}

/// One decoded instruction.
///
/// `wide` is `Some` exactly for [`LD_DW_IMM`]; `imm` then holds its low half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub opc: u8,
    pub dst: u8,
    pub src: u8,
    pub off: i16,
    pub imm: i32,
    pub wide: Option<i64>,
}

impl Instruction {
    pub const fn new(opc: u8, dst: u8, src: u8, off: i16, imm: i32) -> Self {
        Instruction { opc, dst, src, off, imm, wide: None }
    }

    pub const fn lddw(dst: u8, value: i64) -> Self {
        Instruction { opc: LD_DW_IMM, dst, src: 0, off: 0, imm: value as i32, wide: Some(value) }
    }

    pub const fn mov64_imm(dst: u8, imm: i32) -> Self {
        Self::new(MOV64_IMM, dst, 0, 0, imm)
    }

    pub const fn mov64_reg(dst: u8, src: u8) -> Self {
        Self::new(MOV64_REG, dst, src, 0, 0)
    }

    pub const fn exit() -> Self {
        Self::new(EXIT, 0, 0, 0, 0)
    }

    pub const fn call(helper: i32) -> Self {
        Self::new(CALL, 0, 0, 0, helper)
    }

    /// Number of 8-byte slots this instruction occupies.
    pub fn slots(&self) -> usize {
        if self.opc == LD_DW_IMM {
            2
        } else {
            1
        }
    }

    pub fn class(&self) -> u8 {
        self.opc & CLASS_MASK
    }

    pub fn classify(&self) -> Result<InstructionClass, DecodeError> {
        classify_opcode(self.opc).ok_or(DecodeError::UnknownOpcode { opcode: self.opc, slot: 0 })
    }

    pub fn is_memory_access(&self) -> bool {
        matches!(classify_opcode(self.opc), Some(InstructionClass::Load | InstructionClass::Store))
    }

    /// True for `ja` and the conditional jumps (not call/exit).
    pub fn is_jump(&self) -> bool {
        classify_opcode(self.opc) == Some(InstructionClass::Jump)
    }

    pub fn is_call(&self) -> bool {
        self.opc == CALL || self.opc == GUARDED_CALL
    }

    /// Register holding the address base of a load or store.
    pub fn mem_base_reg(&self) -> Option<u8> {
        match self.class() {
            BPF_LDX => Some(self.src),
            BPF_ST | BPF_STX => Some(self.dst),
            _ => None,
        }
    }

    /// Registers named by this instruction (both fields where meaningful).
    pub fn registers(&self) -> impl Iterator<Item = u8> {
        let (d, s) = match classify_opcode(self.opc) {
            Some(InstructionClass::Alu) => (Some(self.dst), (self.opc & SRC_MASK == BPF_X).then_some(self.src)),
            Some(InstructionClass::Load) => (Some(self.dst), Some(self.src)),
            Some(InstructionClass::Store) => (Some(self.dst), (self.class() == BPF_STX).then_some(self.src)),
            Some(InstructionClass::Jump) if self.opc != JA => {
                (Some(self.dst), (self.opc & SRC_MASK == BPF_X).then_some(self.src))
            }
            Some(InstructionClass::LoadImm64) => (Some(self.dst), None),
            _ => (None, None),
        };
        d.into_iter().chain(s)
    }

    /// Access width in bytes of a load or store.
    pub fn access_width(&self) -> Option<usize> {
        if !self.is_memory_access() {
            return None;
        }
        Some(match self.opc & SIZE_MASK {
            BPF_B => 1,
            BPF_H => 2,
            BPF_W => 4,
            _ => 8,
        })
    }
}

/// Classification of a raw opcode; `None` when the opcode is outside the
/// supported subset.
pub fn classify_opcode(opc: u8) -> Option<InstructionClass> {
    let op = opc & OP_MASK;
    match opc & CLASS_MASK {
        BPF_ALU | BPF_ALU64 => match op {
            BPF_NEG if opc & SRC_MASK == BPF_K => Some(InstructionClass::Alu),
            BPF_ADD | BPF_SUB | BPF_MUL | BPF_DIV | BPF_OR | BPF_AND | BPF_LSH | BPF_RSH | BPF_MOD | BPF_XOR
            | BPF_MOV | BPF_ARSH => Some(InstructionClass::Alu),
            _ => None,
        },
        BPF_LD => (opc == LD_DW_IMM).then_some(InstructionClass::LoadImm64),
        BPF_LDX => (opc & MODE_MASK == BPF_MEM).then_some(InstructionClass::Load),
        BPF_ST | BPF_STX => (opc & MODE_MASK == BPF_MEM).then_some(InstructionClass::Store),
        BPF_JMP => match opc {
            JA => Some(InstructionClass::Jump),
            CALL | GUARDED_CALL => Some(InstructionClass::Call),
            EXIT => Some(InstructionClass::Exit),
            _ if is_cond_jump_op(op) => Some(InstructionClass::Jump),
            _ => None,
        },
        BPF_JMP32 => is_cond_jump_op(op).then_some(InstructionClass::Jump),
        _ => None,
    }
}

fn is_cond_jump_op(op: u8) -> bool {
    matches!(
        op,
        BPF_JEQ
            | BPF_JGT
            | BPF_JGE
            | BPF_JSET
            | BPF_JNE
            | BPF_JSGT
            | BPF_JSGE
            | BPF_JLT
            | BPF_JLE
            | BPF_JSLT
            | BPF_JSLE
    )
}

/// Every opcode in the supported subset.
pub fn valid_opcodes() -> impl Iterator<Item = u8> {
    (0u8..=255).filter(|&o| classify_opcode(o).is_some())
}

/// A named, typed instruction sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    pub program_type: ProgramType,
    pub name: String,
}

impl Program {
    pub fn new(name: impl Into<String>, program_type: ProgramType, instructions: Vec<Instruction>) -> Self {
        Program { instructions, program_type, name: name.into() }
    }

    pub fn slot_count(&self) -> usize {
        slot_count(&self.instructions)
    }

    pub fn byte_len(&self) -> usize {
        self.slot_count() * INSN_SIZE
    }
}

pub fn slot_count(insns: &[Instruction]) -> usize {
    insns.iter().map(Instruction::slots).sum()
}

/// Slot index at which each instruction starts.
pub fn slot_starts(insns: &[Instruction]) -> Vec<usize> {
    let mut pos = 0;
    insns
        .iter()
        .map(|i| {
            let at = pos;
            pos += i.slots();
            at
        })
        .collect()
}

fn check_reg(reg: u8, slot: usize) -> Result<u8, DecodeError> {
    if (reg as usize) < NUM_REGS {
        Ok(reg)
    } else {
        Err(DecodeError::InvalidRegister { reg, slot })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Instruction>, DecodeError> {
    if !bytes.len().is_multiple_of(INSN_SIZE) {
        return Err(DecodeError::TruncatedProgram(format!("length {} is not a multiple of {INSN_SIZE}", bytes.len())));
    }
    let slots: Vec<&[u8]> = bytes.chunks_exact(INSN_SIZE).collect();
    let mut out = Vec::with_capacity(slots.len());
    let mut slot = 0;
    while slot < slots.len() {
        let raw = slots[slot];
        let opc = raw[0];
        if classify_opcode(opc).is_none() {
            return Err(DecodeError::UnknownOpcode { opcode: opc, slot });
        }
        let dst = check_reg(raw[1] & 0x0f, slot)?;
        let src = check_reg(raw[1] >> 4, slot)?;
        let off = i16::from_le_bytes([raw[2], raw[3]]);
        let imm = i32::from_le_bytes([raw[4], raw[5], raw[6], raw[7]]);
        if opc == LD_DW_IMM {
            let Some(next) = slots.get(slot + 1) else {
                return Err(DecodeError::TruncatedProgram(format!("wide load at slot {slot} missing its second slot")));
            };
            if next[..4] != [0, 0, 0, 0] {
                return Err(DecodeError::InvalidWideLoad { slot });
            }
            let hi = u32::from_le_bytes([next[4], next[5], next[6], next[7]]);
            let value = ((hi as u64) << 32 | imm as u32 as u64) as i64;
            out.push(Instruction { opc, dst, src, off, imm, wide: Some(value) });
            slot += 2;
        } else {
            out.push(Instruction { opc, dst, src, off, imm, wide: None });
            slot += 1;
        }
    }
    Ok(out)
}

pub fn encode(insns: &[Instruction]) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(slot_count(insns) * INSN_SIZE);
    for (index, insn) in insns.iter().enumerate() {
        let range = |detail: String| EncodeError::RangeError { index, detail };
        if classify_opcode(insn.opc).is_none() {
            return Err(range(format!("opcode {:#04x} outside the supported subset", insn.opc)));
        }
        if insn.dst as usize >= NUM_REGS || insn.src as usize >= NUM_REGS {
            return Err(range(format!("register out of range (dst r{}, src r{})", insn.dst, insn.src)));
        }
        let wide_ok = match (insn.opc == LD_DW_IMM, insn.wide) {
            (true, Some(v)) => v as i32 == insn.imm,
            (false, None) => true,
            _ => false,
        };
        if !wide_ok {
            return Err(range("wide immediate present iff opcode is lddw".into()));
        }
        out.push(insn.opc);
        out.push(insn.src << 4 | insn.dst);
        out.extend_from_slice(&insn.off.to_le_bytes());
        out.extend_from_slice(&insn.imm.to_le_bytes());
        if let Some(v) = insn.wide {
            out.extend_from_slice(&[0; 4]);
            out.extend_from_slice(&(((v as u64) >> 32) as u32).to_le_bytes());
        }
    }
    Ok(out)
}

fn alu_name(op: u8) -> &'static str {
    match op {
        BPF_ADD => "add",
        BPF_SUB => "sub",
        BPF_MUL => "mul",
        BPF_DIV => "div",
        BPF_OR => "or",
        BPF_AND => "and",
        BPF_LSH => "lsh",
        BPF_RSH => "rsh",
        BPF_NEG => "neg",
        BPF_MOD => "mod",
        BPF_XOR => "xor",
        BPF_MOV => "mov",
        BPF_ARSH => "arsh",
        _ => "?",
    }
}

pub(crate) const ALU_OPS: [(&str, u8); 13] = [
    ("add", BPF_ADD),
    ("sub", BPF_SUB),
    ("mul", BPF_MUL),
    ("div", BPF_DIV),
    ("or", BPF_OR),
    ("and", BPF_AND),
    ("lsh", BPF_LSH),
    ("rsh", BPF_RSH),
    ("neg", BPF_NEG),
    ("mod", BPF_MOD),
    ("xor", BPF_XOR),
    ("mov", BPF_MOV),
    ("arsh", BPF_ARSH),
];

pub(crate) const JMP_OPS: [(&str, u8); 11] = [
    ("jeq", BPF_JEQ),
    ("jgt", BPF_JGT),
    ("jge", BPF_JGE),
    ("jset", BPF_JSET),
    ("jne", BPF_JNE),
    ("jsgt", BPF_JSGT),
    ("jsge", BPF_JSGE),
    ("jlt", BPF_JLT),
    ("jle", BPF_JLE),
    ("jslt", BPF_JSLT),
    ("jsle", BPF_JSLE),
];

pub(crate) fn size_suffix(opc: u8) -> &'static str {
    match opc & SIZE_MASK {
        BPF_B => "b",
        BPF_H => "h",
        BPF_W => "w",
        _ => "dw",
    }
}

fn fmt_mem(f: &mut fmt::Formatter<'_>, reg: u8, off: i16) -> fmt::Result {
    if off < 0 {
        write!(f, "[r{reg}-{}]", -(off as i32))
    } else {
        write!(f, "[r{reg}+{off}]")
    }
}

fn fmt_target(f: &mut fmt::Formatter<'_>, off: i16) -> fmt::Result {
    if off < 0 {
        write!(f, "{off}")
    } else {
        write!(f, "+{off}")
    }
}

/// Disassembly in the same syntax accepted by [`crate::asm::parse_asm`].
impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.opc & OP_MASK;
        let reg_src = self.opc & SRC_MASK == BPF_X;
        match self.class() {
            BPF_ALU | BPF_ALU64 => {
                let width = if self.class() == BPF_ALU64 { "64" } else { "32" };
                let name = alu_name(op);
                if op == BPF_NEG {
                    write!(f, "{name}{width} r{}", self.dst)
                } else if reg_src {
                    write!(f, "{name}{width} r{}, r{}", self.dst, self.src)
                } else {
                    write!(f, "{name}{width} r{}, {}", self.dst, self.imm)
                }
            }
            BPF_LD => write!(f, "lddw r{}, {:#x}", self.dst, self.wide.unwrap_or(self.imm as i64) as u64),
            BPF_LDX => {
                write!(f, "ldx{} r{}, ", size_suffix(self.opc), self.dst)?;
                fmt_mem(f, self.src, self.off)
            }
            BPF_ST => {
                write!(f, "st{} ", size_suffix(self.opc))?;
                fmt_mem(f, self.dst, self.off)?;
                write!(f, ", {}", self.imm)
            }
            BPF_STX => {
                write!(f, "stx{} ", size_suffix(self.opc))?;
                fmt_mem(f, self.dst, self.off)?;
                write!(f, ", r{}", self.src)
            }
            BPF_JMP | BPF_JMP32 => match self.opc {
                JA => {
                    f.write_str("ja ")?;
                    fmt_target(f, self.off)
                }
                CALL => write!(f, "call {}", self.imm),
                GUARDED_CALL => write!(f, "gcall {}", self.imm),
                EXIT => f.write_str("exit"),
                _ => {
                    let name = JMP_OPS.iter().find(|(_, o)| *o == op).map_or("j?", |(n, _)| n);
                    let width = if self.class() == BPF_JMP32 { "32" } else { "" };
                    if reg_src {
                        write!(f, "{name}{width} r{}, r{}, ", self.dst, self.src)?;
                    } else {
                        write!(f, "{name}{width} r{}, {}, ", self.dst, self.imm)?;
                    }
                    fmt_target(f, self.off)
                }
            },
            _ => write!(f, ".byte {:#04x}", self.opc),
        }
    }
}

/// Multi-line listing of a sequence, one instruction per line.
pub fn disassemble(insns: &[Instruction]) -> String {
    let mut s = String::new();
    for i in insns {
        s.push_str(&i.to_string());
        s.push('\n');
    }
    s
}
