//! Criterion benchmarks for the sandbox: the masking primitive, helper
//! dispatch through the trampoline, and the bundled samples raw against
//! sandboxed.

use std::hint::black_box;

use bpfbox::corpus::samples;
use bpfbox::executor::{execute, ExecOptions, Executable, Mode, Runtime};
use bpfbox::isa::{Program, ProgramType};
use bpfbox::kernel::{KernelMemory, KernelObjects};
use bpfbox::parse_asm;
use bpfbox::rewriter::instrument;
use bpfbox::sandbox::{compute_masks, default_base, mask_address, LayoutSpec, Sandbox};
use bpfbox::ContextInput;
use criterion::{BatchSize, BenchmarkId, Criterion, Throughput};

const SIZE: u64 = 4096;

fn sandbox() -> (Sandbox, KernelObjects) {
    let sb = Sandbox::new(SIZE, &LayoutSpec::default()).expect("sandbox");
    let mut k = KernelObjects::standard();
    k.memory = KernelMemory::with_canaries(&sb);
    (sb, k)
}

fn masking(c: &mut Criterion) {
    let masks = compute_masks(default_base(SIZE), SIZE).expect("masks");
    let addrs: Vec<u64> = (0..1024u64).map(|i| i.wrapping_mul(0x9e37_79b9_7f4a_7c15)).collect();
    let mut g = c.benchmark_group("mask_address");
    g.throughput(Throughput::Elements(addrs.len() as u64));
    g.bench_function("1024 addresses", |b| {
        b.iter(|| addrs.iter().fold(0u64, |acc, &a| acc ^ mask_address(&masks, black_box(a))))
    });
    g.finish();
}

/// 16 memory ops or 16 helper calls, so the per-check difference shows up
/// against the same loop with neither.
fn straight_line(kind: &str) -> Program {
    let body = match kind {
        "mem" => "stxdw [r10-8], r0\n",
        "call" => "call 35\n",
        _ => "add64 r0, 1\n",
    };
    Program::new(kind, ProgramType::Kprobe, parse_asm(&(body.repeat(16) + "mov64 r0, 0\nexit")).expect("asm"))
}

fn checks(c: &mut Criterion) {
    let mut g = c.benchmark_group("checks");
    let policy = bpfbox::cfi::Policy::from_json(r#"{"kprobe": [35]}"#).expect("policy");
    let registry = bpfbox::helpers::HelperRegistry::with_defaults();
    let table = bpfbox::cfi::build_capability_table(&policy, &registry).expect("table");
    let rt = Runtime::new(registry, table);
    for kind in ["alu", "mem", "call"] {
        let p = straight_line(kind);
        let (mut sb, k) = sandbox();
        let ip = instrument(&p, &sb.masks()).expect("instrument");
        let ctx = ContextInput::default();
        let opts = ExecOptions::default();
        g.bench_with_input(BenchmarkId::new("sandboxed", kind), &ip, |b, ip| {
            b.iter_batched_ref(
                || k.clone(),
                |k| execute(Executable::Instrumented(ip), &mut sb, k, &ctx, &rt, &opts).expect("run"),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn corpus(c: &mut Criterion) {
    let rt = Runtime::standard();
    for s in samples() {
        let mut g = c.benchmark_group(s.name);
        let p = s.program();
        let (mut sb, k) = sandbox();
        let ip = instrument(&p, &sb.masks()).expect("instrument");
        for (payload, _) in &s.payloads {
            let ctx = s.input(payload).expect("payload");
            let sandboxed = ExecOptions { descriptor: s.descriptor(), ..ExecOptions::default() };
            let raw = ExecOptions { mode: Mode::Raw, ..sandboxed.clone() };
            g.bench_function(BenchmarkId::new("raw", payload), |b| {
                b.iter_batched_ref(
                    || k.clone(),
                    |k| execute(Executable::Raw(&p), &mut sb, k, &ctx, &rt, &raw).expect("run"),
                    BatchSize::SmallInput,
                )
            });
            g.bench_function(BenchmarkId::new("sandboxed", payload), |b| {
                b.iter_batched_ref(
                    || k.clone(),
                    |k| execute(Executable::Instrumented(&ip), &mut sb, k, &ctx, &rt, &sandboxed).expect("run"),
                    BatchSize::SmallInput,
                )
            });
        }
        g.finish();
    }
}

pub fn benchmarks(c: &mut Criterion) {
    masking(c);
    checks(c);
    corpus(c);
}
