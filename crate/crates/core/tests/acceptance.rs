//! Acceptance runner: one PASS/FAIL line per criterion, each under its own
//! time limit. Exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use bpfbox::asm::parse_asm;
use bpfbox::corpus::{run_exploit_suite, sample};
use bpfbox::executor::{account, execute, CostModel, ExecOptions, Executable, Mode, Runtime, Trap};
use bpfbox::helpers::ContextInput;
use bpfbox::isa::{Program, ProgramType};
use bpfbox::kernel::{KernelMemory, KernelObjects};
use bpfbox::rewriter::{instrument, BYTES_PER_MASK_CHECK};
use bpfbox::sandbox::{compute_masks, default_base, mask_address, ExecutedCounters, LayoutSpec, Sandbox};
use common::{random_program, ringbuf_model, scan_counts, GenOptions};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn worked_example() -> Outcome {
    let m = compute_masks(0xDEAD_B800, 2048).map_err(|e| e.to_string())?;
    ensure(m.and_mask == 0x7FF && m.or_mask == 0xDEAD_B800, || format!("masks {:#x}/{:#x}", m.and_mask, m.or_mask))?;
    let a = mask_address(&m, 0xDEAF_1234);
    ensure(a == 0xDEAD_BA34, || format!("mask_address gave {a:#x}"))?;
    Ok("0xDEAF1234 -> 0xDEADBA34, masks 0x7FF/0xDEADB800".into())
}

fn confinement_sweep() -> Outcome {
    let small = compute_masks(default_base(64), 64).map_err(|e| e.to_string())?;
    let base = small.or_mask;
    for addr in 0u64..1 << 16 {
        let a = mask_address(&small, addr);
        ensure(a >= base && a < base + 64, || format!("size 64: {addr:#x} -> {a:#x}"))?;
    }
    let big = compute_masks(default_base(4096), 4096).map_err(|e| e.to_string())?;
    let base = big.or_mask;
    let mut rng = StdRng::seed_from_u64(0x5eed_0002);
    for _ in 0..1_000_000 {
        let addr: u64 = rng.gen();
        let a = mask_address(&big, addr);
        ensure(a >= base && a < base + 4096, || format!("size 4096: {addr:#x} -> {a:#x}"))?;
    }
    Ok("65536 exhaustive at 64 B, 1000000 random at 4096 B, 0 violations".into())
}

fn exploit_containment() -> Outcome {
    let mut cases = 0;
    for size in [4096, 2048] {
        for r in run_exploit_suite(size).map_err(|e| e.to_string())? {
            ensure(r.raw_effect_observed, || {
                format!("{} at {size} B: raw run showed no OOB effect ({:?})", r.name, r.raw)
            })?;
            ensure(r.confined, || format!("{} at {size} B: escaped ({:?})", r.name, r.sandboxed))?;
            ensure(r.sandboxed_reads_masked_target != Some(false), || {
                format!("{}: r0 is not the masked in-sandbox word", r.name)
            })?;
            cases += 1;
        }
    }
    Ok(format!("{cases} case runs: raw effect observed, sandboxed confined, 0 escapes"))
}

fn cfi() -> Outcome {
    let n = common::check_cfi_against_oracle()?;
    Ok(format!("{n} (type, helper) pairs agree with the linear scan"))
}

fn count_oracles() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed_0005);
    let masks = compute_masks(default_base(4096), 4096).map_err(|e| e.to_string())?;
    for i in 0..200 {
        let len = rng.gen_range(1..300);
        let p = random_program(&mut rng, ProgramType::SocketFilter, &GenOptions::unrestricted(len));
        let report = bpfbox::loader::precheck(&p.instructions, &Default::default());
        ensure(report.accepted, || format!("program {i} rejected by precheck: {:?}", report.violations))?;
        let ip = instrument(&p, &masks).map_err(|e| e.to_string())?;
        let (mem, calls) = scan_counts(&p.instructions);
        let s = ip.injected();
        ensure(s.mask_checks == mem && s.trampoline_checks == calls, || {
            format!("program {i}: injected {}/{} vs scan {mem}/{calls}", s.mask_checks, s.trampoline_checks)
        })?;
        ensure(s.instrumented_bytes == s.original_bytes + BYTES_PER_MASK_CHECK as u64 * mem, || {
            format!("program {i}: byte growth")
        })?;
        ensure(ip.to_bytes().len() as u64 == s.instrumented_bytes, || format!("program {i}: encoded length"))?;
    }
    Ok("200 programs, counts and byte growth exact".into())
}

fn path_dependence() -> Outcome {
    let s = sample("load-balancer").ok_or("load-balancer sample missing")?;
    let mut sb = Sandbox::new(4096, &LayoutSpec::default()).map_err(|e| e.to_string())?;
    let mut k = KernelObjects::standard();
    let ip = instrument(&s.program(), &sb.masks()).map_err(|e| e.to_string())?;
    let opts = ExecOptions { descriptor: s.descriptor(), ..ExecOptions::default() };
    let input = s.input("common").ok_or("no common payload")?;
    let r = execute(Executable::Instrumented(&ip), &mut sb, &mut k, &input, &Runtime::standard(), &opts)
        .map_err(|e| e.to_string())?;
    let (executed, injected) = (r.counters.mask_executed, ip.injected().mask_checks);
    ensure(r.returned().is_some(), || format!("common path trapped: {:?}", r.status))?;
    ensure(executed * 10 < injected, || format!("executed {executed} of {injected} injected"))?;
    Ok(format!(
        "common path executed {executed} of {injected} injected checks ({:.1}%)",
        100.0 * executed as f64 / injected as f64
    ))
}

fn differential() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed_0007);
    let rt = Runtime::standard();
    let none = ContextInput::default();
    for i in 0..500 {
        let len = rng.gen_range(1..200);
        let p = random_program(&mut rng, ProgramType::SocketFilter, &GenOptions::in_bounds(len));
        let mut a = Sandbox::new(4096, &LayoutSpec::default()).unwrap();
        let mut b = Sandbox::new(4096, &LayoutSpec::default()).unwrap();
        let mut ka = KernelObjects::standard();
        ka.memory = KernelMemory::with_canaries(&a);
        let mut kb = ka.clone();
        let ip = instrument(&p, &a.masks()).map_err(|e| e.to_string())?;
        let raw = ExecOptions { mode: Mode::Raw, ..ExecOptions::default() };
        let r1 = execute(Executable::Raw(&p), &mut a, &mut ka, &none, &rt, &raw).map_err(|e| e.to_string())?;
        let r2 = execute(Executable::Instrumented(&ip), &mut b, &mut kb, &none, &rt, &ExecOptions::default())
            .map_err(|e| e.to_string())?;
        ensure(r1.status == r2.status, || format!("program {i}: raw {:?} vs sandboxed {:?}", r1.status, r2.status))?;
        ensure(r1.returned().is_some(), || format!("program {i}: trapped {:?}", r1.status))?;
        ensure(a.bytes() == b.bytes(), || format!("program {i}: sandbox memory differs"))?;
    }
    Ok("500 programs, identical returns and sandbox state".into())
}

fn termination() -> Outcome {
    let p = Program::new("loop", ProgramType::Xdp, parse_asm("l: ja l").map_err(|e| e.to_string())?);
    let mut sb = Sandbox::new(4096, &LayoutSpec::default()).unwrap();
    let mut k = KernelObjects::standard();
    let ip = instrument(&p, &sb.masks()).map_err(|e| e.to_string())?;
    for budget in [10, 1000, 1_000_000] {
        let opts = ExecOptions { budget, ..ExecOptions::default() };
        let r = execute(
            Executable::Instrumented(&ip),
            &mut sb,
            &mut k,
            &ContextInput::default(),
            &Runtime::standard(),
            &opts,
        )
        .map_err(|e| e.to_string())?;
        ensure(r.trap() == Some(&Trap::BudgetExhausted), || format!("budget {budget}: {:?}", r.status))?;
        ensure(r.counters.instructions_retired == budget, || {
            format!("budget {budget}: retired {}", r.counters.instructions_retired)
        })?;
    }
    Ok("BudgetExhausted with retired = B for B in {10, 1000, 1000000}".into())
}

fn ring_round_trip() -> Outcome {
    let n = ringbuf_model::check_all(5)?;
    Ok(format!("{n} operation sequences match the model"))
}

fn overhead_arithmetic() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed_0010);
    for _ in 0..100_000 {
        let m = CostModel {
            unit_mask_cost: rng.gen_range(0..1 << 20),
            unit_trampoline_cost: rng.gen_range(0..1 << 20),
            manage_cost: rng.gen_range(0..1 << 20),
        };
        let c = ExecutedCounters {
            mask_executed: rng.gen_range(0..1 << 20),
            trampoline_executed: rng.gen_range(0..1 << 20),
            instructions_retired: rng.gen(),
        };
        let b = account(&c, &m);
        ensure(b.c_overall == b.c_mem + b.c_tram + b.c_manage, || format!("{b:?} does not sum"))?;
        let k = rng.gen_range(0..64);
        let scaled = account(&ExecutedCounters { mask_executed: c.mask_executed * k, ..c }, &m);
        ensure(scaled.c_mem == k * b.c_mem && scaled.c_tram == b.c_tram, || "mask linearity".into())?;
        let scaled = account(&ExecutedCounters { trampoline_executed: c.trampoline_executed * k, ..c }, &m);
        ensure(scaled.c_tram == k * b.c_tram && scaled.c_mem == b.c_mem, || "trampoline linearity".into())?;
        let sum = account(&ExecutedCounters { mask_executed: c.mask_executed + 1, ..c }, &m);
        ensure(sum.c_mem == b.c_mem + m.unit_mask_cost, || "additivity".into())?;
    }
    Ok("100000 random inputs: sum and linearity exact".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("worked-example fidelity", Duration::from_millis(1), worked_example),
        ("confinement property", Duration::from_secs(5), confinement_sweep),
        ("exploit containment", Duration::from_secs(10), exploit_containment),
        ("control-flow integrity", Duration::from_secs(5), cfi),
        ("count oracles", Duration::from_secs(30), count_oracles),
        ("path dependence", Duration::from_secs(5), path_dependence),
        ("differential semantics", Duration::from_secs(60), differential),
        ("termination", Duration::from_secs(5), termination),
        ("ring buffer round trip", Duration::from_secs(5), ring_round_trip),
        ("overhead model arithmetic", Duration::from_secs(1), overhead_arithmetic),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > *limit => Err(format!("{detail}; took {elapsed:?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}; {elapsed:.2?})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
