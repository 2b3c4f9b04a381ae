//! Reading programs, payloads, policies and context descriptors.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use bpfbox::cfi::{build_capability_table, Policy};
use bpfbox::corpus::{self, Sample};
use bpfbox::executor::Runtime;
use bpfbox::helpers::{ContextDescriptor, ContextInput, HelperRegistry};
use bpfbox::isa::{decode, Program, ProgramType};
use bpfbox::kernel::{KernelMemory, KernelObjects};
use bpfbox::parse_asm;
use bpfbox::sandbox::{default_base, LayoutSpec, Sandbox};

use crate::Global;

pub const SAMPLE_PREFIX: &str = "sample:";

pub struct Loaded {
    pub program: Program,
    pub sample: Option<Sample>,
}

fn is_text(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("s" | "asm"))
}

/// `arg` is either `sample:<name>` or a path. Paths ending in `.s`/`.asm`
/// are assembled, anything else is decoded as raw bytecode.
pub fn program(arg: &str, ty: Option<ProgramType>) -> Result<Loaded> {
    if let Some(name) = arg.strip_prefix(SAMPLE_PREFIX) {
        let sample = corpus::sample(name).ok_or_else(|| {
            let names: Vec<_> = corpus::samples().iter().map(|s| s.name).collect();
            anyhow!("no bundled sample `{name}` (have: {})", names.join(", "))
        })?;
        let mut program = sample.program();
        if let Some(ty) = ty {
            program.program_type = ty;
        }
        return Ok(Loaded { program, sample: Some(sample) });
    }

    let path = Path::new(arg);
    let ty = ty.unwrap_or(ProgramType::Xdp);
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("program");
    let insns = if is_text(path) {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        parse_asm(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        decode(&bytes).map_err(|e| anyhow!("{}: {e}", path.display()))?
    };
    Ok(Loaded { program: Program::new(name, ty, insns), sample: None })
}

pub fn descriptor(g: &Global, ty: ProgramType) -> Result<ContextDescriptor> {
    match &g.ctx {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ContextDescriptor::from_json(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
        }
        None => Ok(ContextDescriptor::for_program_type(ty)),
    }
}

/// Packet bytes from `--input`: `sample:<payload>` names a payload of the
/// loaded sample, anything else is a file. No input means the sample's
/// first payload, or an empty packet.
pub fn payload(input: Option<&str>, sample: Option<&Sample>) -> Result<(String, Vec<u8>)> {
    match (input, sample) {
        (Some(arg), _) if arg.starts_with(SAMPLE_PREFIX) => {
            let name = &arg[SAMPLE_PREFIX.len()..];
            let s = sample.ok_or_else(|| anyhow!("`{arg}` needs a bundled sample program"))?;
            let bytes = s.payload(name).ok_or_else(|| {
                let names: Vec<_> = s.payloads.iter().map(|(n, _)| *n).collect();
                anyhow!("sample `{}` has no payload `{name}` (have: {})", s.name, names.join(", "))
            })?;
            Ok((name.to_string(), bytes.to_vec()))
        }
        (Some(path), _) => Ok((path.to_string(), fs::read(path).with_context(|| format!("reading {path}"))?)),
        (None, Some(s)) => {
            let (name, bytes) = &s.payloads[0];
            Ok((name.to_string(), bytes.clone()))
        }
        (None, None) => Ok(("empty".into(), Vec::new())),
    }
}

pub fn context_input(desc: &ContextDescriptor, packet: &[u8]) -> ContextInput {
    ContextInput::for_packet(desc, packet)
}

pub fn runtime(g: &Global) -> Result<Runtime> {
    let Some(path) = &g.policy else { return Ok(Runtime::standard()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let policy = Policy::from_json(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    let registry = HelperRegistry::with_defaults();
    let table = build_capability_table(&policy, &registry).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    Ok(Runtime::new(registry, table))
}

pub fn sandbox(g: &Global) -> Result<Sandbox> {
    let base = g.base.unwrap_or_else(|| default_base(g.size));
    Sandbox::with_base(base, g.size, &LayoutSpec::default()).map_err(|e| anyhow!("sandbox: {e}"))
}

/// Standard kernel objects plus canary memory around `sandbox`.
pub fn kernel(sandbox: &Sandbox) -> KernelObjects {
    let mut k = KernelObjects::standard();
    k.memory = KernelMemory::with_canaries(sandbox);
    k
}

pub fn parse_u64(s: &str) -> Result<u64, String> {
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16),
        None => s.replace('_', "").parse(),
    };
    parsed.map_err(|e| e.to_string())
}

pub fn note_type_override(loaded: &Loaded, ty: Option<ProgramType>) {
    if let (Some(s), Some(t)) = (&loaded.sample, ty) {
        if s.program_type != t {
            eprintln!("note: running sample `{}` as {t} (written for {})", s.name, s.program_type);
        }
    }
}
