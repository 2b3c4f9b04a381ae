// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Text assembler for test and sample programs.
//!
//! One instruction per line, lowercase mnemonics, `;` comments and
//! `name:` labels. Jump targets are either a signed slot offset (`+2`, `-1`)
//! or a label. Memory operands are written `[rN+off]` / `[rN-off]`.
//!
//! ```text
//! start:
//!     ldxw r2, [r1+0]     ; packet start
//!     jeq r2, 0, out
//!     mov64 r0, 1
//! out:
//!     exit
//! ```

use std::collections::HashMap;

use thiserror::Error;

use crate::isa::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error("line {line}: {msg}")]
    SyntaxError { line: usize, msg: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
}

enum Target {
    Offset(i64),
    Label(String),
}

struct Pending {
    insn: Instruction,
    target: Option<Target>,
    line: usize,
}

pub fn parse_asm(text: &str) -> Result<Vec<Instruction>, AsmError> {
    let mut labels: HashMap<String, usize> = HashMap::new();
    let mut pending = Vec::new();
    let mut slot = 0usize;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let mut rest = raw.split(';').next().unwrap_or("").trim();
        // Leading labels, possibly followed by an instruction on the same line.
        while let Some(colon) = rest.find(':') {
            let name = rest[..colon].trim();
            if name.is_empty() || !is_ident(name) {
                break;
            }
            if labels.insert(name.to_string(), slot).is_some() {
                return Err(AsmError::DuplicateLabel { line, label: name.to_string() });
            }
            rest = rest[colon + 1..].trim();
        }
        if rest.is_empty() {
            continue;
        }
        let p = parse_line(rest, line)?;
        slot += p.insn.slots();
        pending.push(p);
    }

    let mut out = Vec::with_capacity(pending.len());
    let mut slot = 0usize;
    for p in pending {
        let mut insn = p.insn;
        let next = slot + insn.slots();
        if let Some(t) = p.target {
            let off = match t {
                Target::Offset(o) => o,
                Target::Label(name) => match labels.get(&name) {
                    Some(&at) => at as i64 - next as i64,
                    None => return Err(AsmError::UndefinedLabel { line: p.line, label: name }),
                },
            };
            insn.off = i16::try_from(off).map_err(|_| AsmError::SyntaxError {
                line: p.line,
                msg: format!("jump offset {off} does not fit in 16 bits"),
            })?;
        }
        slot = next;
        out.push(insn);
    }
    Ok(out)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_line(text: &str, line: usize) -> Result<Pending, AsmError> {
    let err = |msg: String| AsmError::SyntaxError { line, msg };
    let (mnemonic, operands) = match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], text[i..].trim()),
        None => (text, ""),
    };
    let ops = split_operands(operands);
    let want = |n: usize| -> Result<(), AsmError> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(err(format!("`{mnemonic}` expects {n} operand(s), got {}", ops.len())))
        }
    };
    let done = |insn: Instruction| Ok(Pending { insn, target: None, line });

    match mnemonic {
        "exit" => {
            want(0)?;
            return done(Instruction::exit());
        }
        "call" | "gcall" => {
            want(1)?;
            let id = parse_imm32(ops[0]).map_err(err)?;
            let opc = if mnemonic == "call" { CALL } else { GUARDED_CALL };
            return done(Instruction::new(opc, 0, 0, 0, id));
        }
        "ja" => {
            want(1)?;
            return Ok(Pending { insn: Instruction::new(JA, 0, 0, 0, 0), target: Some(parse_target(ops[0])), line });
        }
        "lddw" => {
            want(2)?;
            let dst = parse_reg(ops[0]).map_err(err)?;
            let v = parse_int(ops[1]).map_err(err)?;
            if v < i64::MIN as i128 || v > u64::MAX as i128 {
                return Err(err(format!("immediate {v} out of 64-bit range")));
            }
            return done(Instruction::lddw(dst, v as u64 as i64));
        }
        _ => {}
    }

    if let Some(sfx) = mnemonic.strip_prefix("ldx") {
        want(2)?;
        let opc = BPF_LDX | BPF_MEM | parse_size(sfx).ok_or_else(|| err(format!("unknown mnemonic `{mnemonic}`")))?;
        let dst = parse_reg(ops[0]).map_err(err)?;
        let (src, off) = parse_mem(ops[1]).map_err(err)?;
        return done(Instruction::new(opc, dst, src, off, 0));
    }
    if let Some(sfx) = mnemonic.strip_prefix("stx") {
        want(2)?;
        let opc = BPF_STX | BPF_MEM | parse_size(sfx).ok_or_else(|| err(format!("unknown mnemonic `{mnemonic}`")))?;
        let (dst, off) = parse_mem(ops[0]).map_err(err)?;
        let src = parse_reg(ops[1]).map_err(err)?;
        return done(Instruction::new(opc, dst, src, off, 0));
    }
    if let Some(sfx) = mnemonic.strip_prefix("st") {
        if let Some(size) = parse_size(sfx) {
            want(2)?;
            let (dst, off) = parse_mem(ops[0]).map_err(err)?;
            let imm = parse_imm32(ops[1]).map_err(err)?;
            return done(Instruction::new(BPF_ST | BPF_MEM | size, dst, 0, off, imm));
        }
    }

    // ALU: <op>64 / <op>32
    for (name, op) in ALU_OPS {
        let Some(width) = mnemonic.strip_prefix(name) else { continue };
        let class = match width {
            "64" => BPF_ALU64,
            "32" => BPF_ALU,
            _ => continue,
        };
        if op == BPF_NEG {
            want(1)?;
            let dst = parse_reg(ops[0]).map_err(err)?;
            return done(Instruction::new(class | op, dst, 0, 0, 0));
        }
        want(2)?;
        let dst = parse_reg(ops[0]).map_err(err)?;
        return done(match parse_reg(ops[1]) {
            Ok(src) => Instruction::new(class | BPF_X | op, dst, src, 0, 0),
            Err(_) => Instruction::new(class | BPF_K | op, dst, 0, 0, parse_imm32(ops[1]).map_err(err)?),
        });
    }

    // Conditional jumps: <cond> / <cond>32
    for (name, op) in JMP_OPS {
        let Some(width) = mnemonic.strip_prefix(name) else { continue };
        let class = match width {
            "" => BPF_JMP,
            "32" => BPF_JMP32,
            _ => continue,
        };
        want(3)?;
        let dst = parse_reg(ops[0]).map_err(err)?;
        let insn = match parse_reg(ops[1]) {
            Ok(src) => Instruction::new(class | BPF_X | op, dst, src, 0, 0),
            Err(_) => Instruction::new(class | BPF_K | op, dst, 0, 0, parse_imm32(ops[1]).map_err(err)?),
        };
        return Ok(Pending { insn, target: Some(parse_target(ops[2])), line });
    }

    Err(err(format!("unknown mnemonic `{mnemonic}`")))
}

fn split_operands(s: &str) -> Vec<&str> {
    if s.is_empty() {
        return Vec::new();
    }
    s.split(',').map(str::trim).collect()
}

fn parse_size(s: &str) -> Option<u8> {
    match s {
        "b" => Some(BPF_B),
        "h" => Some(BPF_H),
        "w" => Some(BPF_W),
        "dw" => Some(BPF_DW),
        _ => None,
    }
}

fn parse_reg(s: &str) -> Result<u8, String> {
    s.strip_prefix('r')
        .and_then(|n| n.parse::<u8>().ok())
        .filter(|&n| (n as usize) < NUM_REGS)
        .ok_or_else(|| format!("expected register, found `{s}`"))
}

fn parse_int(s: &str) -> Result<i128, String> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i128::from_str_radix(hex, 16)
    } else {
        body.parse::<i128>()
    }
    .map_err(|_| format!("expected integer, found `{s}`"))?;
    Ok(if neg { -v } else { v })
}

/// 32-bit immediates accept both the signed and unsigned spelling.
fn parse_imm32(s: &str) -> Result<i32, String> {
    let v = parse_int(s)?;
    if v >= i32::MIN as i128 && v <= u32::MAX as i128 {
        Ok(v as i64 as u32 as i32)
    } else {
        Err(format!("immediate {v} out of 32-bit range"))
    }
}

fn parse_mem(s: &str) -> Result<(u8, i16), String> {
    let inner = s
        .strip_prefix('[')
        .and_then(|x| x.strip_suffix(']'))
        .ok_or_else(|| format!("expected memory operand, found `{s}`"))?
        .trim();
    let split = inner.find(['+', '-']);
    let (reg, off) = match split {
        Some(i) => (inner[..i].trim(), parse_int(&inner[i..].replace(' ', ""))?),
        None => (inner, 0),
    };
    let off = i16::try_from(off).map_err(|_| format!("offset {off} does not fit in 16 bits"))?;
    Ok((parse_reg(reg)?, off))
}

fn parse_target(s: &str) -> Target {
    match parse_int(s) {
        Ok(v) => Target::Offset(v.clamp(i64::MIN as i128, i64::MAX as i128) as i64),
        Err(_) => Target::Label(s.to_string()),
    }
}
