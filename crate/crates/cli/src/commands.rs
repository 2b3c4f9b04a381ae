use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use bpfbox::corpus::{self, ExploitReport, Observation};
use bpfbox::executor::{
    account, calibrate, execute, CostModel, ExecOptions, ExecStatus, Executable, ExecutionResult, Mode,
    OverheadBreakdown, Runtime, TraceEntry,
};
use bpfbox::isa::{encode, slot_count, Program, ProgramType};
use bpfbox::kernel::KernelObjects;
use bpfbox::loader::{precheck as run_precheck, CheckReport, Limits};
use bpfbox::rewriter::{instrument as rewrite, size_report, InjectedStats, InstrumentedProgram};
use bpfbox::sandbox::{ConfinementEvent, ExecutedCounters, Sandbox};
use bpfbox::{parse_asm, ContextDescriptor};
use serde::Serialize;

use crate::load::{self, Loaded};
use crate::{Global, EXIT_ESCAPE, EXIT_OK, EXIT_PARSE, EXIT_PRECHECK, EXIT_TRAP};

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn limits(g: &Global) -> Limits {
    Limits { allow_back_edges: g.allow_loops, ..Limits::default() }
}

/// Print the violations and return the exit code when `report` rejects.
fn report_rejection(g: &Global, program: &Program, report: &CheckReport) -> Option<u8> {
    if report.accepted {
        return None;
    }
    if g.json {
        print_json(&PrecheckReport { program: &program.name, instructions: program.instructions.len(), report });
    } else {
        eprintln!("{}: rejected", program.name);
        for v in &report.violations {
            eprintln!("  {v}");
        }
    }
    Some(EXIT_PRECHECK)
}

pub fn asm(g: &Global, source: &Path, output: &Path) -> Result<u8> {
    let text = fs::read_to_string(source).with_context(|| format!("reading {}", source.display()))?;
    let insns = match parse_asm(&text) {
        Ok(insns) => insns,
        Err(e) => {
            eprintln!("error: {}: {e}", source.display());
            return Ok(EXIT_PARSE);
        }
    };
    let bytes = encode(&insns).map_err(|e| anyhow!("{}: {e}", source.display()))?;
    fs::write(output, &bytes).with_context(|| format!("writing {}", output.display()))?;
    let slots = slot_count(&insns);
    if g.json {
        print_json(
            &serde_json::json!({ "output": output, "instructions": insns.len(), "slots": slots, "bytes": bytes.len() }),
        );
    } else {
        println!("{slots} slots ({} bytes) written to {}", bytes.len(), output.display());
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct PrecheckReport<'a> {
    program: &'a str,
    instructions: usize,
    #[serde(flatten)]
    report: &'a CheckReport,
}

pub fn precheck(g: &Global, arg: &str, ty: Option<ProgramType>) -> Result<u8> {
    let Loaded { program, .. } = load::program(arg, ty)?;
    let report = run_precheck(&program.instructions, &limits(g));
    if let Some(code) = report_rejection(g, &program, &report) {
        return Ok(code);
    }
    if g.json {
        print_json(&PrecheckReport {
            program: &program.name,
            instructions: program.instructions.len(),
            report: &report,
        });
    } else {
        println!("{}: accepted ({} instructions)", program.name, program.instructions.len());
    }
    Ok(EXIT_OK)
}

/// Pre-check and rewrite for `sandbox`. `Err(code)` when either step rejects.
fn checked_instrument(g: &Global, program: &Program, sandbox: &Sandbox) -> Result<InstrumentedProgram, u8> {
    let report = run_precheck(&program.instructions, &limits(g));
    if let Some(code) = report_rejection(g, program, &report) {
        return Err(code);
    }
    rewrite(program, &sandbox.masks()).map_err(|e| {
        eprintln!("{}: cannot instrument: {e}", program.name);
        EXIT_PRECHECK
    })
}

pub fn instrument(
    g: &Global,
    arg: &str,
    ty: Option<ProgramType>,
    output: Option<&Path>,
    stats: Option<&Path>,
) -> Result<u8> {
    let Loaded { program, .. } = load::program(arg, ty)?;
    let sandbox = load::sandbox(g)?;
    let ip = match checked_instrument(g, &program, &sandbox) {
        Ok(ip) => ip,
        Err(code) => return Ok(code),
    };
    if let Some(out) = output {
        fs::write(out, ip.to_bytes()).with_context(|| format!("writing {}", out.display()))?;
    }
    let json = serde_json::to_string_pretty(ip.injected()).expect("stats serialize");
    if let Some(path) = stats {
        fs::write(path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    if g.json {
        println!("{json}");
    } else {
        println!("{}", size_report(ip.injected()));
        if let Some(out) = output {
            println!("written to {}", out.display());
        }
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct TrapReport {
    kind: &'static str,
    message: String,
}

#[derive(Serialize)]
struct RunReport<'a> {
    program: &'a str,
    program_type: ProgramType,
    mode: Mode,
    payload: &'a str,
    status: &'static str,
    return_value: Option<u64>,
    trap: Option<TrapReport>,
    counters: ExecutedCounters,
    injected: Option<&'a InjectedStats>,
    cost_model: CostModel,
    breakdown: OverheadBreakdown,
    confinement_events: &'a [ConfinementEvent],
    ring_records: Vec<Vec<String>>,
    #[serde(skip_serializing_if = "no_trace")]
    trace: &'a [TraceEntry],
}

fn no_trace(t: &&[TraceEntry]) -> bool {
    t.is_empty()
}

fn status_line(status: &ExecStatus) -> String {
    match status {
        ExecStatus::Returned(v) => format!("returned {v}"),
        ExecStatus::Trap(t) => format!("trap {t}"),
    }
}

fn read_cost_model(path: Option<&Path>) -> Result<CostModel> {
    let Some(path) = path else { return Ok(CostModel::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    // accept either a bare model or a bench report carrying one
    let model = value.get("cost_model").cloned().unwrap_or(value);
    serde_json::from_value(model).with_context(|| format!("{}: not a cost model", path.display()))
}

pub fn run(
    g: &Global,
    arg: &str,
    ty: Option<ProgramType>,
    input: Option<&str>,
    cost_model: Option<&Path>,
    trace: bool,
) -> Result<u8> {
    let loaded = load::program(arg, ty)?;
    load::note_type_override(&loaded, ty);
    let program = &loaded.program;
    let mut sandbox = load::sandbox(g)?;
    let mut kernel = load::kernel(&sandbox);
    let runtime = load::runtime(g)?;
    let descriptor = load::descriptor(g, program.program_type)?;
    let (payload_name, packet) = load::payload(input, loaded.sample.as_ref())?;
    let ctx = load::context_input(&descriptor, &packet);
    let model = read_cost_model(cost_model)?;

    let mode = if g.unsafe_raw { Mode::Raw } else { Mode::Sandboxed };
    let instrumented = match mode {
        Mode::Sandboxed => match checked_instrument(g, program, &sandbox) {
            Ok(ip) => Some(ip),
            Err(code) => return Ok(code),
        },
        Mode::Raw => {
            if let Some(code) = report_rejection(g, program, &run_precheck(&program.instructions, &limits(g))) {
                return Ok(code);
            }
            eprintln!("warning: running without the sandbox (--unsafe-raw)");
            None
        }
    };
    let exe = match &instrumented {
        Some(ip) => Executable::Instrumented(ip),
        None => Executable::Raw(program),
    };
    let opts = ExecOptions { mode, budget: g.budget, descriptor, cost_model: model, detect: g.detect, trace };
    let result = execute(exe, &mut sandbox, &mut kernel, &ctx, &runtime, &opts).map_err(|e| anyhow!("{e}"))?;

    let code = if result.returned().is_some() { EXIT_OK } else { EXIT_TRAP };
    let report = RunReport {
        program: &program.name,
        program_type: program.program_type,
        mode,
        payload: &payload_name,
        status: if result.returned().is_some() { "returned" } else { "trap" },
        return_value: result.returned(),
        trap: result.trap().map(|t| TrapReport { kind: t.name(), message: t.to_string() }),
        counters: result.counters,
        injected: instrumented.as_ref().map(InstrumentedProgram::injected),
        cost_model: model,
        breakdown: result.breakdown,
        confinement_events: &result.confinement_events,
        ring_records: kernel.ringbufs.iter().map(|rb| rb.records().iter().map(|r| hex(r)).collect()).collect(),
        trace: &result.trace,
    };
    if g.json {
        print_json(&report);
    } else {
        print_run_text(&report, &result, &kernel);
    }
    Ok(code)
}

fn print_run_text(report: &RunReport<'_>, result: &ExecutionResult, kernel: &KernelObjects) {
    for t in report.trace {
        println!("{:>5} [{:>4}] {}", t.slot, t.origin_slot, t.mnemonic);
    }
    println!("{}", status_line(&result.status));
    let c = &report.counters;
    println!("instructions retired: {}", c.instructions_retired);
    match report.injected {
        Some(inj) => {
            println!("mask checks executed: {} of {} injected", c.mask_executed, inj.mask_checks);
            println!("trampoline checks executed: {} of {} injected", c.trampoline_executed, inj.trampoline_checks);
        }
        None => println!("raw mode: no checks"),
    }
    let b = &report.breakdown;
    if report.cost_model == CostModel::default() {
        println!("overhead: no cost model (pass --cost-model)");
    } else {
        println!(
            "overhead (ps): c_mem={} c_tram={} c_manage={} c_overall={}",
            b.c_mem, b.c_tram, b.c_manage, b.c_overall
        );
    }
    if !report.confinement_events.is_empty() {
        println!("confinement events:");
        for e in report.confinement_events {
            println!("  slot {}: {:#x} -> {:#x}", e.instruction_index, e.original_address, e.masked_address);
        }
    }
    for (i, rb) in kernel.ringbufs.iter().enumerate() {
        if !rb.records().is_empty() {
            println!("ring {i}: {} record(s)", rb.records().len());
            for r in rb.records() {
                println!("  {}", hex(r));
            }
        }
    }
}

#[derive(Serialize)]
struct ModeTiming {
    mean_ns: f64,
    status: String,
    samples_ns: Vec<u64>,
}

#[derive(Serialize)]
struct PayloadBench {
    payload: String,
    raw: ModeTiming,
    sandboxed: ModeTiming,
    counters: ExecutedCounters,
    breakdown: OverheadBreakdown,
}

#[derive(Serialize)]
struct BenchReport<'a> {
    program: &'a str,
    program_type: ProgramType,
    iterations: u64,
    injected: &'a InjectedStats,
    cost_model: CostModel,
    payloads: Vec<PayloadBench>,
}

fn time_once(
    exe: Executable<'_>,
    sandbox: &mut Sandbox,
    fresh: &KernelObjects,
    ctx: &bpfbox::ContextInput,
    runtime: &Runtime,
    opts: &ExecOptions,
) -> Result<(u64, ExecutionResult)> {
    let mut kernel = fresh.clone();
    let start = Instant::now();
    let r = execute(exe, sandbox, &mut kernel, ctx, runtime, opts).map_err(|e| anyhow!("{e}"))?;
    Ok((start.elapsed().as_nanos() as u64, r))
}

fn mean(samples: &[u64]) -> f64 {
    samples.iter().sum::<u64>() as f64 / samples.len().max(1) as f64
}

pub fn bench(
    g: &Global,
    arg: &str,
    ty: Option<ProgramType>,
    iterations: u64,
    inputs: &[String],
    calibration: u64,
) -> Result<u8> {
    let loaded = load::program(arg, ty)?;
    let program = &loaded.program;
    let mut sandbox = load::sandbox(g)?;
    let ip = match checked_instrument(g, program, &sandbox) {
        Ok(ip) => ip,
        Err(code) => return Ok(code),
    };
    let runtime = load::runtime(g)?;
    let descriptor: ContextDescriptor = load::descriptor(g, program.program_type)?;
    let payloads = if inputs.is_empty() {
        match &loaded.sample {
            Some(s) => s.payloads.iter().map(|(n, p)| (n.to_string(), p.clone())).collect(),
            None => vec![load::payload(None, None)?],
        }
    } else {
        inputs.iter().map(|i| load::payload(Some(i), loaded.sample.as_ref())).collect::<Result<Vec<_>>>()?
    };

    let model = calibrate(calibration).map_err(|e| anyhow!("calibration: {e}"))?;
    let fresh = load::kernel(&sandbox);
    let sandboxed =
        ExecOptions { budget: g.budget, descriptor: descriptor.clone(), cost_model: model, ..ExecOptions::default() };
    let raw = ExecOptions { mode: Mode::Raw, ..sandboxed.clone() };

    let mut results = Vec::with_capacity(payloads.len());
    for (name, packet) in &payloads {
        let ctx = load::context_input(&descriptor, packet);
        let mut raw_ns = Vec::with_capacity(iterations as usize);
        let mut sb_ns = Vec::with_capacity(iterations as usize);
        let mut last = None;
        let mut raw_status = String::new();
        for _ in 0..iterations {
            let (t, r) = time_once(Executable::Raw(program), &mut sandbox, &fresh, &ctx, &runtime, &raw)?;
            raw_ns.push(t);
            raw_status = status_line(&r.status);
            let (t, r) = time_once(Executable::Instrumented(&ip), &mut sandbox, &fresh, &ctx, &runtime, &sandboxed)?;
            sb_ns.push(t);
            last = Some(r);
        }
        let last = last.expect("at least one iteration");
        results.push(PayloadBench {
            payload: name.clone(),
            raw: ModeTiming { mean_ns: mean(&raw_ns), status: raw_status, samples_ns: raw_ns },
            sandboxed: ModeTiming { mean_ns: mean(&sb_ns), status: status_line(&last.status), samples_ns: sb_ns },
            counters: last.counters,
            breakdown: account(&last.counters, &model),
        });
    }

    let report = BenchReport {
        program: &program.name,
        program_type: program.program_type,
        iterations,
        injected: ip.injected(),
        cost_model: model,
        payloads: results,
    };
    if g.json {
        print_json(&report);
        return Ok(EXIT_OK);
    }
    println!("{} ({}), {iterations} iterations per payload", report.program, report.program_type);
    println!(
        "cost model: mask {:.3} ns, trampoline {:.3} ns, manage {:.3} ns",
        model.unit_mask_cost as f64 / 1000.0,
        model.unit_trampoline_cost as f64 / 1000.0,
        model.manage_cost as f64 / 1000.0
    );
    for p in &report.payloads {
        let delta = 100.0 * (p.sandboxed.mean_ns - p.raw.mean_ns) / p.raw.mean_ns.max(1.0);
        println!(
            "payload {}: raw {:.1} ns, sandboxed {:.1} ns ({delta:+.1}%), {}",
            p.payload, p.raw.mean_ns, p.sandboxed.mean_ns, p.sandboxed.status
        );
        println!(
            "  executed checks: mask {}/{}, trampoline {}/{}",
            p.counters.mask_executed,
            report.injected.mask_checks,
            p.counters.trampoline_executed,
            report.injected.trampoline_checks
        );
        let b = &p.breakdown;
        println!(
            "  breakdown (ps): c_mem={} c_tram={} c_manage={} c_overall={}",
            b.c_mem, b.c_tram, b.c_manage, b.c_overall
        );
    }
    Ok(EXIT_OK)
}

fn describe(o: &Observation) -> String {
    let mut parts = vec![o.status.clone()];
    if !o.canaries_intact {
        parts.push("canary overwritten".into());
    }
    if o.leaked_via_r0 {
        parts.push(format!("kernel bytes in r0 ({:#018x})", o.r0.unwrap_or_default()));
    }
    for (leaked, via) in [(o.leaked_via_ring, "ring buffer"), (o.leaked_via_map, "map")] {
        if leaked {
            parts.push(format!("kernel bytes in {via}"));
        }
    }
    if o.confinement_events > 0 {
        parts.push(format!("{} confinement event(s)", o.confinement_events));
    }
    parts.join(", ")
}

#[derive(Serialize)]
struct SuiteReport<'a> {
    sandbox_size: u64,
    all_confined: bool,
    cases: &'a [ExploitReport],
}

pub fn exploit_suite(g: &Global) -> Result<u8> {
    let reports = corpus::run_exploit_suite(g.size).map_err(|e| anyhow!("sandbox: {e}"))?;
    let all_confined = reports.iter().all(|r| r.confined);
    if g.json {
        print_json(&SuiteReport { sandbox_size: g.size, all_confined, cases: &reports });
    } else {
        for r in &reports {
            println!("{}", r.name);
            let effect = if r.raw_effect_observed { "effect observed" } else { "EFFECT NOT OBSERVED" };
            println!("  raw:       {effect}: {}", describe(&r.raw));
            let verdict = if r.confined { "confined" } else { "ESCAPED" };
            println!("  sandboxed: {verdict}: {}", describe(&r.sandboxed));
        }
        let confined = reports.iter().filter(|r| r.confined).count();
        println!("{confined}/{} cases confined", reports.len());
    }
    for r in reports.iter().filter(|r| !r.raw_effect_observed) {
        eprintln!("warning: {}: raw run did not show the out-of-bounds effect", r.name);
    }
    Ok(if all_confined { EXIT_OK } else { EXIT_ESCAPE })
}

pub fn samples(g: &Global, name: Option<&str>) -> Result<u8> {
    let all = corpus::samples();
    if let Some(name) = name {
        let s = all.iter().find(|s| s.name == name).ok_or_else(|| anyhow!("no bundled sample `{name}`"))?;
        print!("{}", s.source);
        return Ok(EXIT_OK);
    }
    if g.json {
        let list: Vec<_> = all
            .iter()
            .map(|s| {
                serde_json::json!({
                    "name": s.name,
                    "program_type": s.program_type,
                    "instructions": s.program().instructions.len(),
                    "payloads": s.payloads.iter().map(|(n, _)| n).collect::<Vec<_>>(),
                })
            })
            .collect();
        print_json(&list);
    } else {
        for s in &all {
            let payloads: Vec<_> = s.payloads.iter().map(|(n, _)| *n).collect();
            println!("{:<16} {:<14} payloads: {}", s.name, s.program_type.name(), payloads.join(", "));
        }
    }
    Ok(EXIT_OK)
}
