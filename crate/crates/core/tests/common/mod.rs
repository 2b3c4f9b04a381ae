//! Random program generators shared by the integration tests and the
//! acceptance runner.

#![allow(dead_code)]

pub mod ringbuf_model;

use bpfbox::helpers::*;
use bpfbox::isa::*;
use rand::rngs::StdRng;
use rand::Rng;

const ALU_OPS: [u8; 13] = [
    BPF_ADD, BPF_SUB, BPF_MUL, BPF_DIV, BPF_OR, BPF_AND, BPF_LSH, BPF_RSH, BPF_NEG, BPF_MOD, BPF_XOR, BPF_MOV, BPF_ARSH,
];
const COND_OPS: [u8; 11] =
    [BPF_JEQ, BPF_JGT, BPF_JGE, BPF_JSET, BPF_JNE, BPF_JSGT, BPF_JSGE, BPF_JLT, BPF_JLE, BPF_JSLT, BPF_JSLE];
const SIZES: [(u8, i16); 4] = [(BPF_B, 1), (BPF_H, 2), (BPF_W, 4), (BPF_DW, 8)];

enum Item {
    Insn(Instruction),
    /// Conditional forward jump to the item at `target`.
    Jump {
        insn: Instruction,
        target: usize,
    },
}

/// How much freedom the generator has.
#[derive(Debug, Clone, Copy)]
pub struct GenOptions {
    pub len: usize,
    /// Memory operands may use any base register (never executed safely).
    pub any_base: bool,
    /// Helper ids to draw calls from.
    pub helpers: &'static [u32],
    /// Stack bytes the generated accesses may touch below r10.
    pub stack_len: i16,
}

impl GenOptions {
    /// Programs that only touch the stack and call permitted, pointer-free
    /// helpers: safe to run raw and sandboxed side by side.
    pub fn in_bounds(len: usize) -> Self {
        GenOptions { len, any_base: false, helpers: &[BPF_GET_CURRENT_TASK], stack_len: 512 }
    }

    /// Anything the pre-check accepts, for static counting.
    pub fn unrestricted(len: usize) -> Self {
        GenOptions { len, any_base: true, helpers: &[1, 2, 35, 131, 132, 133, 7, 99], stack_len: 512 }
    }
}

fn user_reg(rng: &mut StdRng) -> u8 {
    rng.gen_range(0..10)
}

fn any_reg(rng: &mut StdRng) -> u8 {
    rng.gen_range(0..=10)
}

fn imm(rng: &mut StdRng) -> i32 {
    match rng.gen_range(0..4) {
        0 => rng.gen_range(-4..64),
        1 => rng.gen(),
        2 => 0,
        _ => rng.gen_range(0..32),
    }
}

fn alu(rng: &mut StdRng) -> Instruction {
    let class = if rng.gen_bool(0.7) { BPF_ALU64 } else { BPF_ALU };
    let op = ALU_OPS[rng.gen_range(0..ALU_OPS.len())];
    let reg = op != BPF_NEG && rng.gen_bool(0.5);
    let opc = class | op | if reg { BPF_X } else { BPF_K };
    let k = if reg || op == BPF_NEG { 0 } else { imm(rng) };
    Instruction::new(opc, user_reg(rng), if reg { any_reg(rng) } else { 0 }, 0, k)
}

fn memory(rng: &mut StdRng, opts: &GenOptions) -> Instruction {
    let (size, width) = SIZES[rng.gen_range(0..4)];
    let base = if opts.any_base { any_reg(rng) } else { FRAME_REG };
    let off = if opts.any_base {
        rng.gen_range(-512..512)
    } else {
        // aligned slot inside the stack area
        -(rng.gen_range(1..=opts.stack_len / width) * width)
    };
    match rng.gen_range(0..3) {
        0 => Instruction::new(BPF_LDX | BPF_MEM | size, user_reg(rng), base, off, 0),
        1 => Instruction::new(BPF_ST | BPF_MEM | size, base, 0, off, imm(rng)),
        _ => Instruction::new(BPF_STX | BPF_MEM | size, base, any_reg(rng), off, 0),
    }
}

fn cond(rng: &mut StdRng) -> Instruction {
    let class = if rng.gen_bool(0.7) { BPF_JMP } else { BPF_JMP32 };
    let op = COND_OPS[rng.gen_range(0..COND_OPS.len())];
    if rng.gen_bool(0.5) {
        Instruction::new(class | op | BPF_X, user_reg(rng), any_reg(rng), 0, 0)
    } else {
        Instruction::new(class | op | BPF_K, user_reg(rng), 0, 0, imm(rng))
    }
}

/// A random loop-free program of `opts.len` items plus a final `exit`.
/// Jumps only go forward and are all conditional, so every instruction is
/// reachable by falling through.
pub fn random_program(rng: &mut StdRng, ty: ProgramType, opts: &GenOptions) -> Program {
    let mut items = Vec::with_capacity(opts.len + 1);
    for i in 0..opts.len {
        let item = match rng.gen_range(0..20) {
            0..=7 => Item::Insn(alu(rng)),
            8..=12 => Item::Insn(memory(rng, opts)),
            13 => Item::Insn(Instruction::lddw(user_reg(rng), rng.gen())),
            14 if !opts.helpers.is_empty() => {
                Item::Insn(Instruction::call(opts.helpers[rng.gen_range(0..opts.helpers.len())] as i32))
            }
            _ => Item::Jump { insn: cond(rng), target: rng.gen_range(i + 1..=opts.len) },
        };
        items.push(item);
    }
    items.push(Item::Insn(Instruction::exit()));

    let mut slot_of = Vec::with_capacity(items.len());
    let mut slot = 0usize;
    for item in &items {
        slot_of.push(slot);
        slot += match item {
            Item::Insn(i) | Item::Jump { insn: i, .. } => i.slots(),
        };
    }
    let insns = items
        .iter()
        .enumerate()
        .map(|(i, item)| match item {
            Item::Insn(insn) => *insn,
            Item::Jump { insn, target } => Instruction { off: (slot_of[*target] - slot_of[i] - 1) as i16, ..*insn },
        })
        .collect();
    Program::new("random", ty, insns)
}

/// Independent static scan: (memory accesses, helper calls).
pub fn scan_counts(insns: &[Instruction]) -> (u64, u64) {
    let mut mem = 0;
    let mut calls = 0;
    for i in insns {
        match i.opc & CLASS_MASK {
            BPF_LDX | BPF_ST | BPF_STX if i.opc & MODE_MASK == BPF_MEM => mem += 1,
            BPF_JMP if i.opc == CALL => calls += 1,
            _ => {}
        }
    }
    (mem, calls)
}

const RESERVE_8: &str = "mov64 r1, 0\nmov64 r2, 8\nmov64 r3, 0\ncall 131\n";

/// Source for a program whose last call is to `helper_id` with arguments
/// that make a permitted call succeed. Submit/discard get a live
/// reservation first when `reserve_allowed`.
pub fn helper_call_source(helper_id: u32, reserve_allowed: bool) -> String {
    match helper_id {
        BPF_MAP_LOOKUP_ELEM => "stw [r10-4], 1\nmov64 r1, 0\nmov64 r2, r10\nadd64 r2, -4\ncall 1\nexit".into(),
        BPF_MAP_UPDATE_ELEM => "stw [r10-4], 1\nstdw [r10-16], 7\nmov64 r1, 0\nmov64 r2, r10\nadd64 r2, -4\n\
             mov64 r3, r10\nadd64 r3, -16\nmov64 r4, 0\ncall 2\nexit"
            .into(),
        BPF_RINGBUF_RESERVE => format!("{RESERVE_8}exit"),
        BPF_RINGBUF_SUBMIT | BPF_RINGBUF_DISCARD if reserve_allowed => {
            format!("{RESERVE_8}mov64 r1, r0\nmov64 r2, 0\ncall {helper_id}\nexit")
        }
        _ => format!("mov64 r1, 0\nmov64 r2, 0\ncall {helper_id}\nexit"),
    }
}

/// Run a call to every registered helper (plus a few unregistered ids)
/// under every program type with the default policy, comparing the outcome
/// with a linear scan of the policy's pairs. Returns the number of pairs.
pub fn check_cfi_against_oracle() -> Result<usize, String> {
    use bpfbox::cfi::{build_capability_table, check_call, Policy};
    use bpfbox::executor::{execute, ExecOptions, Executable, Runtime, Trap};
    use bpfbox::kernel::KernelObjects;
    use bpfbox::rewriter::instrument;
    use bpfbox::sandbox::{LayoutSpec, Sandbox};

    let policy = Policy::default_policy();
    let pairs: Vec<(ProgramType, u32)> = policy.pairs().collect();
    let oracle = |ty: ProgramType, id: u32| pairs.iter().any(|&(t, h)| t == ty && h == id);
    let registry = HelperRegistry::with_defaults();
    let table = build_capability_table(&policy, &registry).map_err(|e| e.to_string())?;
    let rt = Runtime::standard();
    let ids: Vec<u32> = registry.ids().chain([0, 7, 99, 200]).collect();

    let mut checked = 0;
    for ty in ProgramType::ALL {
        for &id in &ids {
            let allowed = oracle(ty, id);
            if check_call(&table, ty, id).allowed != allowed {
                return Err(format!("{ty}/{id}: table disagrees with scan"));
            }
            let src = helper_call_source(id, oracle(ty, BPF_RINGBUF_RESERVE));
            let p = Program::new("cfi", ty, bpfbox::asm::parse_asm(&src).map_err(|e| e.to_string())?);
            let mut sb = Sandbox::new(4096, &LayoutSpec::default()).unwrap();
            let mut k = KernelObjects::standard();
            let before = k.clone();
            let ip = instrument(&p, &sb.masks()).map_err(|e| e.to_string())?;
            let r = execute(
                Executable::Instrumented(&ip),
                &mut sb,
                &mut k,
                &ContextInput::default(),
                &rt,
                &ExecOptions::default(),
            )
            .map_err(|e| e.to_string())?;
            if allowed {
                if r.returned().is_none() || r.counters.trampoline_executed == 0 {
                    return Err(format!("{ty}/{id}: permitted call failed with {:?}", r.status));
                }
            } else {
                if r.trap() != Some(&Trap::CfiViolation { helper_id: id }) {
                    return Err(format!("{ty}/{id}: expected CfiViolation, got {:?}", r.status));
                }
                // Nothing ran: no dispatch counted, nothing allocated, no kernel change.
                if r.counters.trampoline_executed != 0
                    || sb.metadata.heap_cursor != sb.layout().heap_offset
                    || k != before
                {
                    return Err(format!("{ty}/{id}: side effect before the denial"));
                }
            }
            checked += 1;
        }
    }
    Ok(checked)
}
