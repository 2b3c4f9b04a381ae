// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Linear overhead model: memory checks plus trampoline checks plus a fixed
//! per-run management cost.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{execute, ExecOptions, Executable, Mode, Runtime};
use crate::helpers::{ContextDescriptor, ContextInput, BPF_GET_CURRENT_TASK};
use crate::isa::{Instruction, Program, ProgramType, LDX_DW};
use crate::kernel::KernelObjects;
use crate::rewriter::instrument;
use crate::sandbox::{ExecutedCounters, LayoutSpec, Sandbox, DEFAULT_SIZE};

/// Unit costs in picoseconds (integer, so the breakdown sums exactly).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub unit_mask_cost: u64,
    pub unit_trampoline_cost: u64,
    pub manage_cost: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadBreakdown {
    pub c_mem: u64,
    pub c_tram: u64,
    pub c_manage: u64,
    pub c_overall: u64,
}

pub fn account(counters: &ExecutedCounters, model: &CostModel) -> OverheadBreakdown {
    let c_mem = counters.mask_executed.saturating_mul(model.unit_mask_cost);
    let c_tram = counters.trampoline_executed.saturating_mul(model.unit_trampoline_cost);
    let c_manage = model.manage_cost;
    OverheadBreakdown { c_mem, c_tram, c_manage, c_overall: c_mem.saturating_add(c_tram).saturating_add(c_manage) }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CalibrationError {
    #[error("calibration needs at least {min} iterations, got {got}")]
    TooFewIterations { min: u64, got: u64 },
    #[error("timer resolution too coarse to measure anything")]
    TimerUnavailable,
}

pub const MIN_CALIBRATION_ITERATIONS: u64 = 1000;
const CHECKS_PER_RUN: usize = 32;

struct Bench {
    sandbox: Sandbox,
    kernel: KernelObjects,
    runtime: Runtime,
}

impl Bench {
    fn time(&mut self, exe: Executable<'_>, opts: &ExecOptions, input: &ContextInput, iterations: u64) -> u128 {
        let start = Instant::now();
        for _ in 0..iterations {
            let r = execute(exe, &mut self.sandbox, &mut self.kernel, input, &self.runtime, opts)
                .expect("calibration program runs");
            black_box(r.status);
        }
        start.elapsed().as_nanos()
    }
}

/// Measure unit costs with micro-loops: instrumented versus raw runs of a
/// load-only and a call-only program, and a near-empty program for the
/// fixed setup/teardown cost.
pub fn calibrate(iterations: u64) -> Result<CostModel, CalibrationError> {
    if iterations < MIN_CALIBRATION_ITERATIONS {
        return Err(CalibrationError::TooFewIterations { min: MIN_CALIBRATION_ITERATIONS, got: iterations });
    }
    let mut b = Bench {
        sandbox: Sandbox::new(DEFAULT_SIZE, &LayoutSpec::default()).expect("default sandbox"),
        kernel: KernelObjects::standard(),
        runtime: Runtime::standard(),
    };
    let masks = b.sandbox.masks();

    let mut loads = vec![Instruction::new(LDX_DW, 0, 10, -8, 0); CHECKS_PER_RUN];
    loads.push(Instruction::exit());
    let loads = Program::new("calibrate-mem", ProgramType::SocketFilter, loads);
    let mut calls = vec![Instruction::call(BPF_GET_CURRENT_TASK as i32); CHECKS_PER_RUN];
    calls.push(Instruction::exit());
    let calls = Program::new("calibrate-tram", ProgramType::SocketFilter, calls);
    let empty =
        Program::new("calibrate-manage", ProgramType::Xdp, vec![Instruction::mov64_imm(0, 0), Instruction::exit()]);

    let loads_i = instrument(&loads, &masks).expect("straight-line program");
    let calls_i = instrument(&calls, &masks).expect("straight-line program");
    let empty_i = instrument(&empty, &masks).expect("straight-line program");

    let sandboxed = ExecOptions { mode: Mode::Sandboxed, ..ExecOptions::default() };
    let raw = ExecOptions { mode: Mode::Raw, ..ExecOptions::default() };
    let none = ContextInput::default();

    let per_check = |with: u128, without: u128| -> u64 {
        let diff = with.saturating_sub(without) * 1000;
        (diff / (iterations as u128 * CHECKS_PER_RUN as u128)) as u64
    };

    // warm up caches and the allocator
    b.time(Executable::Instrumented(&loads_i), &sandboxed, &none, 100);

    let mem_with = b.time(Executable::Instrumented(&loads_i), &sandboxed, &none, iterations);
    let mem_without = b.time(Executable::Raw(&loads), &raw, &none, iterations);
    let tram_with = b.time(Executable::Instrumented(&calls_i), &sandboxed, &none, iterations);
    let tram_without = b.time(Executable::Raw(&calls), &raw, &none, iterations);

    let xdp = ExecOptions { descriptor: ContextDescriptor::xdp(), ..sandboxed.clone() };
    let packet = ContextInput::for_packet(&xdp.descriptor, &[0u8; 64]);
    let manage = b.time(Executable::Instrumented(&empty_i), &xdp, &packet, iterations);
    if manage == 0 {
        return Err(CalibrationError::TimerUnavailable);
    }

    Ok(CostModel {
        unit_mask_cost: per_check(mem_with, mem_without),
        unit_trampoline_cost: per_check(tram_with, tram_without),
        manage_cost: ((manage * 1000 / iterations as u128) as u64).max(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn account_examples() {
        let model = CostModel { unit_mask_cost: 3, unit_trampoline_cost: 10, manage_cost: 5 };
        let zero = ExecutedCounters::default();
        assert_eq!(account(&zero, &model), OverheadBreakdown { c_mem: 0, c_tram: 0, c_manage: 5, c_overall: 5 });
        let c = ExecutedCounters { mask_executed: 37, trampoline_executed: 2, instructions_retired: 500 };
        assert_eq!(account(&c, &model), OverheadBreakdown { c_mem: 111, c_tram: 20, c_manage: 5, c_overall: 136 });
        let doubled = ExecutedCounters { mask_executed: 74, ..c };
        let (a, b) = (account(&c, &model), account(&doubled, &model));
        assert_eq!(b.c_mem, 2 * a.c_mem);
        assert_eq!(b.c_tram, a.c_tram);
    }

    #[test]
    fn calibration_rejects_short_runs() {
        assert_eq!(calibrate(10), Err(CalibrationError::TooFewIterations { min: 1000, got: 10 }));
    }

    #[test]
    fn calibration_yields_positive_manage_cost() {
        let m = calibrate(1000).unwrap();
        assert!(m.manage_cost > 0);
    }
}
