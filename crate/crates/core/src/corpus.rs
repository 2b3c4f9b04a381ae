// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Bundled sample programs and the out-of-bounds exploit corpus.

use serde::Serialize;

use crate::asm::parse_asm;
use crate::executor::{execute, ExecOptions, ExecStatus, Executable, Mode, Runtime};
use crate::helpers::{ContextDescriptor, ContextInput};
use crate::isa::{Program, ProgramType};
use crate::kernel::{leaks_canary, KernelMemory, KernelObjects, CANARY, CRED_ADDR};
use crate::rewriter::instrument;
use crate::sandbox::{LayoutSpec, Sandbox, SandboxError};

/// A sample program together with the context it expects and a few
/// named packet payloads.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: &'static str,
    pub program_type: ProgramType,
    pub source: &'static str,
    pub payloads: Vec<(&'static str, Vec<u8>)>,
}

impl Sample {
    pub fn program(&self) -> Program {
        let insns = parse_asm(self.source).expect("bundled sample assembles");
        Program::new(self.name, self.program_type, insns)
    }

    pub fn descriptor(&self) -> ContextDescriptor {
        ContextDescriptor::for_program_type(self.program_type)
    }

    pub fn payload(&self, name: &str) -> Option<&[u8]> {
        self.payloads.iter().find(|(n, _)| *n == name).map(|(_, p)| p.as_slice())
    }

    pub fn input(&self, payload: &str) -> Option<ContextInput> {
        Some(ContextInput::for_packet(&self.descriptor(), self.payload(payload)?))
    }
}

const PACKET_LOGGER: &str = "\
; Count packets per 64-byte size bucket in map 0.
    ldxw r2, [r1+0]         ; data
    ldxw r3, [r1+4]         ; data_end
    mov64 r6, r3
    sub64 r6, r2
    rsh64 r6, 6
    jlt r6, 16, +1
    mov64 r6, 15
    stxw [r10-4], r6
    mov64 r1, 0
    mov64 r2, r10
    add64 r2, -4
    call 1
    jeq r0, 0, pass
    ldxdw r3, [r0+0]
    add64 r3, 1
    stxdw [r0+0], r3
pass:
    mov64 r0, 2             ; XDP_PASS
    exit
";

const RING_EXCHANGER: &str = "\
; Publish {len, protocol, first 8 packet bytes} to ring 0; accept the packet.
    mov64 r6, r1
    mov64 r1, 0
    mov64 r2, 16
    mov64 r3, 0
    call 131
    jeq r0, 0, out
    ldxw r2, [r6+0]         ; len
    stxw [r0+0], r2
    ldxw r2, [r6+4]         ; protocol
    stxw [r0+4], r2
    ldxw r3, [r6+12]        ; data
    ldxw r4, [r6+16]        ; data_end
    mov64 r5, r3
    add64 r5, 8
    jgt r5, r4, short
    ldxdw r2, [r3+0]
    stxdw [r0+8], r2
    ja submit
short:
    stdw [r0+8], 0
submit:
    mov64 r1, r0
    mov64 r2, 0
    call 132
out:
    ldxw r0, [r6+0]
    exit
";

/// Load balancer shaped like Katran's fast path: most traffic is not for the
/// VIP and leaves after a handful of accesses; VIP traffic is hashed to a
/// backend and rewritten in place.
const LOAD_BALANCER: &str = "\
    ldxw r2, [r1+0]         ; data
    ldxw r3, [r1+4]         ; data_end
    mov64 r4, r2
    add64 r4, 38
    jgt r4, r3, pass        ; need eth + ip + ports
    ldxh r5, [r2+12]        ; ethertype
    jne r5, 0x0008, pass    ; IPv4, network order
    ldxw r5, [r2+30]        ; ip daddr
    jne r5, 0x0100000a, pass ; 10.0.0.1
    ldxb r5, [r2+23]        ; protocol
    jne r5, 6, pass
    ldxh r5, [r2+36]        ; tcp dport
    jne r5, 0x5000, pass    ; port 80

    ; flow key {saddr, daddr, sport, dport, proto} on the stack
    mov64 r6, r2
    ldxw r7, [r6+26]
    stxw [r10-48], r7
    ldxw r7, [r6+30]
    stxw [r10-44], r7
    ldxh r7, [r6+34]
    stxh [r10-40], r7
    ldxh r7, [r6+36]
    stxh [r10-38], r7
    stb [r10-36], 6

    ; hash the flow: saddr bytes and sport bytes
    ldxb r7, [r6+26]
    ldxb r8, [r6+27]
    lsh64 r8, 8
    or64 r7, r8
    ldxb r8, [r6+28]
    lsh64 r8, 16
    or64 r7, r8
    ldxb r8, [r6+29]
    lsh64 r8, 24
    or64 r7, r8
    stxdw [r10-16], r7
    ldxb r8, [r6+34]
    ldxb r9, [r6+35]
    lsh64 r9, 8
    or64 r8, r9
    stxdw [r10-24], r8
    ldxdw r7, [r10-16]
    ldxdw r8, [r10-24]
    mul64 r7, 0x9e3779b1
    xor64 r7, r8
    mov64 r8, r7
    rsh64 r8, 16
    xor64 r7, r8
    mul64 r7, 0x85ebca6b
    mov64 r8, r7
    rsh64 r8, 13
    xor64 r7, r8
    and64 r7, 7
    stxw [r10-4], r7

    ; backend for this slot
    mov64 r1, 0
    mov64 r2, r10
    add64 r2, -4
    call 1
    jeq r0, 0, drop
    ldxw r7, [r0+0]         ; backend ip
    jeq r7, 0, drop
    mov64 r2, r6

    ; rewrite eth dst / src
    ldxw r8, [r2+0]
    ldxh r9, [r2+4]
    stxw [r10-32], r8
    stxh [r10-28], r9
    ldxw r8, [r2+6]
    ldxh r9, [r2+10]
    stxw [r2+0], r8
    stxh [r2+4], r9
    ldxw r8, [r10-32]
    ldxh r9, [r10-28]
    stxw [r2+6], r8
    stxh [r2+10], r9

    ; decrement ttl
    ldxb r8, [r2+22]
    sub64 r8, 1
    stxb [r2+22], r8

    ; rewrite ip daddr, patch checksum
    ldxw r8, [r2+30]
    stxw [r2+30], r7
    ldxh r9, [r2+24]
    xor64 r9, 0xffff
    mov64 r4, r8
    and64 r4, 0xffff
    sub64 r9, r4
    rsh64 r8, 16
    sub64 r9, r8
    mov64 r4, r7
    and64 r4, 0xffff
    add64 r9, r4
    mov64 r4, r7
    rsh64 r4, 16
    add64 r9, r4
    mov64 r4, r9
    rsh64 r4, 16
    and64 r9, 0xffff
    add64 r9, r4
    xor64 r9, 0xffff
    stxh [r2+24], r9

    ; per-VIP counter in slot 15
    stw [r10-8], 15
    mov64 r1, 0
    mov64 r2, r10
    add64 r2, -8
    call 1
    jeq r0, 0, tx
    ldxdw r3, [r0+0]
    add64 r3, 1
    stxdw [r0+0], r3
tx:
    mov64 r0, 3             ; XDP_TX
    exit
drop:
    mov64 r0, 1             ; XDP_DROP
    exit
pass:
    mov64 r0, 2             ; XDP_PASS
    exit
";

/// Branch-free FNV-style fold over the first 64 packet bytes.
const CHECKSUM: &str = "\
    ldxw r2, [r1+0]
    lddw r0, 0xcbf29ce484222325
    lddw r9, 0x100000001b3
    ldxdw r3, [r2+0]
    xor64 r0, r3
    mul64 r0, r9
    ldxdw r3, [r2+8]
    xor64 r0, r3
    mul64 r0, r9
    ldxdw r3, [r2+16]
    xor64 r0, r3
    mul64 r0, r9
    ldxdw r3, [r2+24]
    xor64 r0, r3
    mul64 r0, r9
    stxdw [r10-8], r0
    ldxdw r3, [r2+32]
    xor64 r0, r3
    mul64 r0, r9
    ldxdw r3, [r2+40]
    xor64 r0, r3
    mul64 r0, r9
    ldxdw r3, [r2+48]
    xor64 r0, r3
    mul64 r0, r9
    ldxdw r3, [r2+56]
    xor64 r0, r3
    mul64 r0, r9
    ldxdw r4, [r10-8]
    xor64 r0, r4
    stxdw [r10-16], r0
    ldxw r4, [r10-16]
    ldxw r5, [r10-12]
    xor64 r4, r5
    mov64 r0, r4
    exit
";

/// Ethernet + IPv4 + TCP header, 64 bytes total.
pub fn tcp_packet(daddr: [u8; 4], dport: u16) -> Vec<u8> {
    let mut p = vec![0u8; 64];
    p[0..6].copy_from_slice(&[0x02, 0, 0, 0, 0, 0x01]);
    p[6..12].copy_from_slice(&[0x02, 0, 0, 0, 0, 0x02]);
    p[12..14].copy_from_slice(&[0x08, 0x00]);
    p[14] = 0x45;
    p[16..18].copy_from_slice(&50u16.to_be_bytes());
    p[22] = 64;
    p[23] = 6;
    p[26..30].copy_from_slice(&[192, 168, 1, 7]);
    p[30..34].copy_from_slice(&daddr);
    p[34..36].copy_from_slice(&40000u16.to_be_bytes());
    p[36..38].copy_from_slice(&dport.to_be_bytes());
    p
}

pub fn samples() -> Vec<Sample> {
    let arp = {
        let mut p = vec![0u8; 42];
        p[12..14].copy_from_slice(&[0x08, 0x06]);
        p
    };
    vec![
        Sample {
            name: "packet-logger",
            program_type: ProgramType::Xdp,
            source: PACKET_LOGGER,
            payloads: vec![("small", vec![0xaa; 60]), ("large", vec![0xbb; 600])],
        },
        Sample {
            name: "ring-exchanger",
            program_type: ProgramType::SocketFilter,
            source: RING_EXCHANGER,
            payloads: vec![("tcp", tcp_packet([10, 0, 0, 9], 443)), ("runt", vec![1, 2, 3])],
        },
        Sample {
            name: "load-balancer",
            program_type: ProgramType::Xdp,
            source: LOAD_BALANCER,
            payloads: vec![
                ("common", tcp_packet([10, 0, 0, 9], 443)),
                ("arp", arp),
                ("vip", tcp_packet([10, 0, 0, 1], 80)),
            ],
        },
        Sample {
            name: "checksum",
            program_type: ProgramType::Xdp,
            source: CHECKSUM,
            payloads: vec![("zeros", vec![0; 64]), ("tcp", tcp_packet([10, 0, 0, 9], 443))],
        },
    ]
}

pub fn sample(name: &str) -> Option<Sample> {
    samples().into_iter().find(|s| s.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RawOutcome {
    OobReadSucceeds,
    OobWriteSucceeds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SandboxedOutcome {
    Confined,
}

/// An attacker-controlled out-of-bounds access. Each program builds a
/// pointer from a legitimate base plus a scalar that the verifier would
/// have believed to be tiny (the tracked-bounds confusion class) but that
/// actually carries the distance to the credential page.
#[derive(Debug, Clone)]
pub struct ExploitCase {
    pub name: &'static str,
    pub description: &'static str,
    pub source: &'static str,
    pub expected_raw_outcome: RawOutcome,
    pub expected_sandboxed_outcome: SandboxedOutcome,
}

impl ExploitCase {
    pub fn program(&self) -> Program {
        let insns = parse_asm(self.source).expect("bundled exploit assembles");
        Program::new(self.name, ProgramType::SocketFilter, insns)
    }
}

const OOB_READ: &str = "\
    mov64 r2, r10
    lddw r4, 0xdeaf1234     ; confused scalar: cred - fp
    sub64 r4, r2
    add64 r2, r4
    ldxdw r0, [r2+0]
    exit
";

const OOB_WRITE: &str = "\
    mov64 r2, r10
    lddw r4, 0xdeaf1234
    sub64 r4, r2
    add64 r2, r4
    stdw [r2+0], 0          ; uid = 0
    mov64 r0, 0
    exit
";

const RINGBUF_OOB_WRITE: &str = "\
    mov64 r1, 0
    mov64 r2, 8
    mov64 r3, 0
    call 131
    jeq r0, 0, out
    mov64 r6, r0
    lddw r4, 0xdeaf1234     ; confused offset from the reservation
    sub64 r4, r6
    mov64 r7, r6
    add64 r7, r4
    stdw [r7+0], 0
    stdw [r6+0], 1
    mov64 r1, r6
    mov64 r2, 0
    call 132
out:
    mov64 r0, 0
    exit
";

const RINGBUF_EXFIL: &str = "\
    mov64 r1, 0
    mov64 r2, 8
    mov64 r3, 0
    call 131
    jeq r0, 0, out
    mov64 r6, r0
    lddw r4, 0xdeaf1234
    sub64 r4, r6
    mov64 r7, r6
    add64 r7, r4
    ldxdw r8, [r7+0]
    stxdw [r6+0], r8
    mov64 r1, r6
    mov64 r2, 0
    call 132
out:
    mov64 r0, 0
    exit
";

const MAP_EXFIL: &str = "\
    stw [r10-4], 3
    mov64 r1, 0
    mov64 r2, r10
    add64 r2, -4
    call 1
    jeq r0, 0, out
    mov64 r6, r0
    lddw r4, 0xdeaf1234
    sub64 r4, r6
    mov64 r7, r6
    add64 r7, r4
    ldxdw r8, [r7+0]
    stxdw [r6+0], r8
out:
    mov64 r0, 0
    exit
";

pub fn exploit_cases() -> Vec<ExploitCase> {
    vec![
        ExploitCase {
            name: "oob-read",
            description: "read the credential word through a frame pointer plus confused scalar",
            source: OOB_READ,
            expected_raw_outcome: RawOutcome::OobReadSucceeds,
            expected_sandboxed_outcome: SandboxedOutcome::Confined,
        },
        ExploitCase {
            name: "oob-write",
            description: "overwrite the credential word through a frame pointer plus confused scalar",
            source: OOB_WRITE,
            expected_raw_outcome: RawOutcome::OobWriteSucceeds,
            expected_sandboxed_outcome: SandboxedOutcome::Confined,
        },
        ExploitCase {
            name: "ringbuf-oob-write",
            description: "write past a ring buffer reservation into the credential page",
            source: RINGBUF_OOB_WRITE,
            expected_raw_outcome: RawOutcome::OobWriteSucceeds,
            expected_sandboxed_outcome: SandboxedOutcome::Confined,
        },
        ExploitCase {
            name: "ringbuf-exfil",
            description: "copy the credential word into a ring buffer record",
            source: RINGBUF_EXFIL,
            expected_raw_outcome: RawOutcome::OobReadSucceeds,
            expected_sandboxed_outcome: SandboxedOutcome::Confined,
        },
        ExploitCase {
            name: "map-exfil",
            description: "copy the credential word into an array map value",
            source: MAP_EXFIL,
            expected_raw_outcome: RawOutcome::OobReadSucceeds,
            expected_sandboxed_outcome: SandboxedOutcome::Confined,
        },
    ]
}

/// What one execution let escape.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Observation {
    pub status: String,
    pub r0: Option<u64>,
    pub canaries_intact: bool,
    pub leaked_via_r0: bool,
    pub leaked_via_ring: bool,
    pub leaked_via_map: bool,
    pub confinement_events: usize,
}

impl Observation {
    pub fn read_escaped(&self) -> bool {
        self.leaked_via_r0 || self.leaked_via_ring || self.leaked_via_map
    }

    pub fn escaped(&self) -> bool {
        self.read_escaped() || !self.canaries_intact
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExploitReport {
    pub name: String,
    pub expected_raw_outcome: RawOutcome,
    pub raw: Observation,
    /// The raw run showed the effect the case is meant to demonstrate.
    pub raw_effect_observed: bool,
    pub sandboxed: Observation,
    /// For read cases: r0 equals the in-sandbox bytes at the masked target.
    pub sandboxed_reads_masked_target: Option<bool>,
    pub confined: bool,
}

fn observe(
    exe: Executable<'_>,
    mode: Mode,
    sandbox: &mut Sandbox,
    runtime: &Runtime,
) -> Result<(Observation, Option<u64>), crate::executor::ExecError> {
    let mut kernel = KernelObjects::standard();
    kernel.memory = KernelMemory::with_canaries(sandbox);
    let pristine = kernel.memory.clone();
    let opts = ExecOptions { mode, detect: mode == Mode::Sandboxed, ..ExecOptions::default() };
    let result = execute(exe, sandbox, &mut kernel, &ContextInput::default(), runtime, &opts)?;
    let r0 = result.returned();
    let status = match &result.status {
        ExecStatus::Returned(v) => format!("returned {v}"),
        ExecStatus::Trap(t) => format!("trap {}", t.name()),
    };
    let obs = Observation {
        status,
        r0,
        canaries_intact: kernel.memory == pristine,
        leaked_via_r0: r0.is_some_and(|v| v == CANARY || leaks_canary(&v.to_le_bytes())),
        leaked_via_ring: kernel.ringbufs.iter().flat_map(|rb| rb.records()).any(|r| leaks_canary(r)),
        leaked_via_map: kernel.maps.iter().any(|m| leaks_canary(m.backing())),
        confinement_events: result.confinement_events.len(),
    };
    Ok((obs, r0))
}

/// Run `case` raw, then sandboxed, in a `size`-byte sandbox at its default
/// base. `Err` only for setup problems, never for an escape.
pub fn run_exploit(case: &ExploitCase, size: u64) -> Result<ExploitReport, SandboxError> {
    let runtime = Runtime::standard();
    let program = case.program();
    let mut sandbox = Sandbox::new(size, &LayoutSpec::default())?;

    let (raw, _) =
        observe(Executable::Raw(&program), Mode::Raw, &mut sandbox, &runtime).expect("raw run needs no context");
    let raw_effect_observed = match case.expected_raw_outcome {
        RawOutcome::OobReadSucceeds => raw.read_escaped(),
        RawOutcome::OobWriteSucceeds => !raw.canaries_intact,
    };

    let instrumented = instrument(&program, &sandbox.masks()).expect("exploit programs are small and jump-safe");
    let (sandboxed, r0) = observe(Executable::Instrumented(&instrumented), Mode::Sandboxed, &mut sandbox, &runtime)
        .expect("sandboxed run needs no context");
    let sandboxed_reads_masked_target = (case.name == "oob-read").then(|| {
        let target = sandbox.masks().apply(CRED_ADDR);
        let expected = sandbox.read(target, 8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")));
        r0.is_some() && r0 == expected
    });
    let confined = !sandboxed.escaped() && !sandboxed.status.ends_with("MemoryFault");

    Ok(ExploitReport {
        name: case.name.to_string(),
        expected_raw_outcome: case.expected_raw_outcome,
        raw,
        raw_effect_observed,
        sandboxed,
        sandboxed_reads_masked_target,
        confined,
    })
}

pub fn run_exploit_suite(size: u64) -> Result<Vec<ExploitReport>, SandboxError> {
    exploit_cases().iter().map(|c| run_exploit(c, size)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loader::{precheck, Limits};

    #[test]
    fn samples_pass_precheck() {
        for s in samples() {
            let p = s.program();
            let report = precheck(&p.instructions, &Limits::default());
            assert!(report.accepted, "{}: {:?}", s.name, report.violations);
        }
    }

    #[test]
    fn exploits_pass_precheck() {
        for c in exploit_cases() {
            assert!(precheck(&c.program().instructions, &Limits::default()).accepted, "{}", c.name);
        }
    }

    #[test]
    fn suite_demonstrates_and_confines() {
        for size in [64, 2048, 4096] {
            for r in run_exploit_suite(size).unwrap() {
                assert!(r.raw_effect_observed, "{size} {}: {:?}", r.name, r.raw);
                assert!(r.confined, "{size} {}: {:?}", r.name, r.sandboxed);
            }
        }
    }

    #[test]
    fn oob_read_raw_returns_canary() {
        let r = run_exploit(&exploit_cases()[0], 4096).unwrap();
        assert_eq!(r.raw.r0, Some(CANARY));
        assert_eq!(r.sandboxed_reads_masked_target, Some(true));
        assert_eq!(r.sandboxed.confinement_events, 1);
    }
}
