// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! A user-space eBPF virtual machine that runs programs inside a
//! software-fault-isolation sandbox.
//!
//! The pipeline is:
//!
//! 1. [`asm::parse_asm`] or [`isa::decode`] produce instructions;
//! 2. [`loader::precheck`] applies the structural load-time checks;
//! 3. [`rewriter::instrument`] masks every load/store and routes every
//!    helper call through the trampoline;
//! 4. [`executor::execute`] interprets the result inside a [`sandbox::Sandbox`],
//!    mirroring kernel objects in and out and counting executed checks.

pub mod asm;
pub mod cfi;
pub mod corpus;
pub mod executor;
pub mod helpers;
pub mod isa;
pub mod kernel;
pub mod loader;
pub mod rewriter;
pub mod sandbox;

pub use asm::{parse_asm, AsmError};
pub use cfi::{build_capability_table, check_call, CallVerdict, CapabilityTable, CfiError, Policy};
pub use executor::{
    account, calibrate, execute, CostModel, ExecError, ExecOptions, ExecStatus, Executable, ExecutionResult, Mode,
    OverheadBreakdown, Runtime, Trap,
};
pub use helpers::{ArrayMap, ContextDescriptor, ContextInput, HelperRegistry, KernelRingBuffer};
pub use isa::{decode, encode, Instruction, InstructionClass, Program, ProgramType};
pub use kernel::{leaks_canary, KernelMemory, KernelObjects, CANARY, CRED_ADDR};
pub use loader::{precheck, CheckReport, Limits, ViolationCode};
pub use rewriter::{instrument, InjectedStats, InstrumentedProgram, RewriteError};
pub use sandbox::{compute_masks, mask_address, AddressMasks, ExecutedCounters, LayoutSpec, Sandbox, SandboxError};
