//! `bpfbox`: assemble, check, instrument and run eBPF programs inside a
//! software-fault-isolation sandbox.

mod commands;
mod load;

use std::path::PathBuf;
use std::process::ExitCode;

use bpfbox::executor::DEFAULT_BUDGET;
use bpfbox::isa::ProgramType;
use bpfbox::sandbox::DEFAULT_SIZE;
use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: u8 = 0;
pub const EXIT_PARSE: u8 = 1;
pub const EXIT_PRECHECK: u8 = 2;
pub const EXIT_TRAP: u8 = 3;
pub const EXIT_ESCAPE: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "bpfbox", version, about = "Run eBPF programs in a software-fault-isolation sandbox")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Sandbox size in bytes (a power of two)
    #[arg(long, global = true, default_value_t = DEFAULT_SIZE)]
    pub size: u64,
    /// Sandbox base address (aligned to --size); defaults near 0xDEADB800
    #[arg(long, global = true, value_parser = load::parse_u64)]
    pub base: Option<u64>,
    /// Instruction budget per execution
    #[arg(long, global = true, default_value_t = DEFAULT_BUDGET)]
    pub budget: u64,
    /// Capability policy JSON: {"xdp": [1, 2], ...}
    #[arg(long, global = true)]
    pub policy: Option<PathBuf>,
    /// Context descriptor JSON (defaults to the program type's layout)
    #[arg(long, global = true)]
    pub ctx: Option<PathBuf>,
    /// Machine-readable output
    #[arg(long, global = true)]
    pub json: bool,
    /// Record every address the masking changed
    #[arg(long, global = true)]
    pub detect: bool,
    /// Run without masking or capability checks
    #[arg(long = "unsafe-raw", global = true)]
    pub unsafe_raw: bool,
    /// Accept backward jumps (the budget still bounds execution)
    #[arg(long = "allow-loops", global = true)]
    pub allow_loops: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assemble a text program into bytecode
    Asm {
        source: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the load-time structural checks
    Precheck {
        /// Program file (.s/.asm text, otherwise bytecode) or sample:<name>
        program: String,
        #[arg(long = "type", value_name = "TYPE")]
        program_type: Option<ProgramType>,
    },
    /// Insert address masking and trampoline checks
    Instrument {
        program: String,
        #[arg(long = "type", value_name = "TYPE")]
        program_type: Option<ProgramType>,
        /// Where to write the instrumented bytecode
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Also write the injected-check statistics as JSON here
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Execute a program once
    Run {
        program: String,
        #[arg(long = "type", value_name = "TYPE")]
        program_type: Option<ProgramType>,
        /// Packet payload file, or sample:<payload> for bundled samples
        #[arg(long)]
        input: Option<String>,
        /// Cost model JSON (as printed by `bench`) for the overhead breakdown
        #[arg(long = "cost-model")]
        cost_model: Option<PathBuf>,
        /// Print every retired instruction
        #[arg(long)]
        trace: bool,
    },
    /// Time raw against sandboxed execution and break down the overhead
    Bench {
        program: String,
        #[arg(long = "type", value_name = "TYPE")]
        program_type: Option<ProgramType>,
        #[arg(short = 'n', long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
        iterations: u64,
        /// Payloads to cycle through (files or sample:<payload>)
        #[arg(long)]
        input: Vec<String>,
        #[arg(long = "calibration-iterations", default_value_t = 5000, value_parser = clap::value_parser!(u64).range(1000..))]
        calibration_iterations: u64,
    },
    /// Run the bundled out-of-bounds exploits raw and sandboxed
    ExploitSuite,
    /// List bundled samples, or print one's source
    Samples { name: Option<String> },
}

/// Die quietly on a closed pipe (`bpfbox ... | head`) like other Unix tools.
#[cfg(unix)]
fn default_sigpipe() {
    // SAFETY: restoring the default disposition before any threads exist.
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn default_sigpipe() {}

fn main() -> ExitCode {
    default_sigpipe();
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match cli.command {
        Command::Asm { source, output } => commands::asm(g, &source, &output),
        Command::Precheck { program, program_type } => commands::precheck(g, &program, program_type),
        Command::Instrument { program, program_type, output, stats } => {
            commands::instrument(g, &program, program_type, output.as_deref(), stats.as_deref())
        }
        Command::Run { program, program_type, input, cost_model, trace } => {
            commands::run(g, &program, program_type, input.as_deref(), cost_model.as_deref(), trace)
        }
        Command::Bench { program, program_type, iterations, input, calibration_iterations } => {
            commands::bench(g, &program, program_type, iterations, &input, calibration_iterations)
        }
        Command::ExploitSuite => commands::exploit_suite(g),
        Command::Samples { name } => commands::samples(g, name.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_PARSE)
        }
    }
}
