//! The `mr` command line.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mr_core::devices::{decode_tape, TapeImage, TAPE_MAGIC};
use mr_core::isa::{disassemble, format_address, IsaTable, Word};
use mr_core::machine::{Machine, MachineConfig, MachineState, RunLimits, StopReason};
use mr_core::microcode::{load_rom, MicroRom};
use mr_core::toolchain::{add_loop_tape, assemble};

use crate::panel::{serve, PanelConfig};

#[derive(Debug, Parser)]
#[command(name = "mr", version, about = "Macchina Ridotta emulator console")]
pub struct Cli {
    /// Microcode table to load instead of the built-in one.
    #[arg(long, global = true)]
    rom: Option<PathBuf>,
    /// Instruction table to load instead of the built-in one.
    #[arg(long, global = true)]
    isa: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Assemble a .mra source into an MRT1 tape and print the listing.
    Asm {
        source: PathBuf,
        /// Tape output; defaults to the source path with an .mrt extension.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Write the listing here instead of standard output.
        #[arg(long)]
        listing: Option<PathBuf>,
    },
    /// Boot a tape, run it, print teletype output; final state goes to stderr.
    Run(RunArgs),
    /// Like run, printing one line per instruction.
    Trace(RunArgs),
    /// Report simulated instructions per second for a named fixture.
    Bench {
        /// Fixture name; only `add-loop` exists.
        fixture: String,
        #[arg(long, default_value_t = 1_000_000)]
        instructions: u64,
    },
    /// Print a tape or state file in readable form.
    Dump { file: PathBuf },
    /// Serve the front-panel protocol and static panel assets.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7957")]
        listen: String,
        /// Snapshot rate cap while the machine runs.
        #[arg(long, default_value_t = 30)]
        refresh_hz: u32,
        /// Directory holding the built front panel.
        #[arg(long)]
        assets: Option<PathBuf>,
        /// Tape to mount on the fast reader for the panel's boot switch.
        #[arg(long)]
        tape: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Boot tape: an MRT1 file, or a .mra source assembled on the fly.
    #[arg(long)]
    tape: PathBuf,
    #[arg(long, default_value_t = 10_000_000)]
    max_instr: u64,
    #[arg(long)]
    max_us: Option<u64>,
    /// Tape to mount on the paper-tape reader (channel 3).
    #[arg(long)]
    reader: Option<PathBuf>,
    /// Where to write frames punched on channel 2.
    #[arg(long)]
    punch: Option<PathBuf>,
    /// Also write the final state snapshot to this file.
    #[arg(long)]
    state: Option<PathBuf>,
}

fn tables(cli: &Cli) -> Result<(Arc<MicroRom>, Arc<IsaTable>)> {
    let rom = match &cli.rom {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            load_rom(&text).map_err(|e| anyhow!("{}: {e}", p.display()))?
        }
        None => MicroRom::default_rom(),
    };
    let isa = match &cli.isa {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            IsaTable::parse(&text).map_err(|e| anyhow!("{}: {e}", p.display()))?
        }
        None => IsaTable::default_table(),
    };
    Ok((Arc::new(rom), Arc::new(isa)))
}

fn machine(cli: &Cli) -> Result<Machine> {
    let (rom, isa) = tables(cli)?;
    Ok(Machine::with_tables(MachineConfig::default(), rom, isa)?)
}

fn read_tape(path: &Path, isa: &IsaTable) -> Result<TapeImage> {
    if path.extension().is_some_and(|e| e == "mra") {
        let src =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let out = assemble(&src, isa)
            .map_err(|e| anyhow!("{}:{}: {}", path.display(), e.line, e.kind))?;
        if out.origin != 0 {
            bail!(
                "{}: program starts at {}, boot loads at 0000",
                path.display(),
                format_address(out.origin)
            );
        }
        return Ok(out.tape);
    }
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    TapeImage::from_bytes(&bytes).map_err(|e| anyhow!("{}: {e}", path.display()))
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e)
            if e.downcast_ref::<io::Error>()
                .is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mr: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Cmd::Asm {
            source,
            output,
            listing,
        } => asm(cli, source, output.as_deref(), listing.as_deref()),
        Cmd::Run(args) => run(cli, args, false),
        Cmd::Trace(args) => run(cli, args, true),
        Cmd::Bench {
            fixture,
            instructions,
        } => bench(cli, fixture, *instructions),
        Cmd::Dump { file } => dump(cli, file),
        Cmd::Serve {
            listen,
            refresh_hz,
            assets,
            tape,
        } => {
            let mut m = machine(cli)?;
            if let Some(t) = tape {
                let tape = read_tape(t, m.isa())?;
                m.mount(mr_core::devices::BOOT_CHANNEL, tape)?;
            }
            let handle = serve(
                m,
                PanelConfig {
                    listen: listen.clone(),
                    refresh_hz: *refresh_hz,
                    assets: assets.clone(),
                },
            )?;
            eprintln!("panel on {}", handle.local_addr());
            handle.wait();
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn asm(
    cli: &Cli,
    source: &Path,
    output: Option<&Path>,
    listing: Option<&Path>,
) -> Result<ExitCode> {
    let (_, isa) = tables(cli)?;
    let src =
        fs::read_to_string(source).with_context(|| format!("reading {}", source.display()))?;
    let out =
        assemble(&src, &isa).map_err(|e| anyhow!("{}:{}: {}", source.display(), e.line, e.kind))?;
    let tape_path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| source.with_extension("mrt"));
    fs::write(&tape_path, out.tape.to_bytes())
        .with_context(|| format!("writing {}", tape_path.display()))?;
    match listing {
        Some(p) => {
            fs::write(p, out.listing_text()).with_context(|| format!("writing {}", p.display()))?
        }
        None => io::stdout()
            .lock()
            .write_all(out.listing_text().as_bytes())?,
    }
    eprintln!(
        "{}: {} words at {}, entry {}",
        tape_path.display(),
        out.words.len(),
        format_address(out.origin),
        format_address(out.entry)
    );
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli, args: &RunArgs, trace: bool) -> Result<ExitCode> {
    let mut m = machine(cli)?;
    let tape = read_tape(&args.tape, m.isa())?;
    if let Some(r) = &args.reader {
        let t = read_tape(r, m.isa())?;
        m.mount(3, t)?;
    }
    m.boot_load(&tape)?;
    m.start();
    let limits = RunLimits {
        max_instructions: args.max_instr,
        max_sim_us: args.max_us.unwrap_or(u64::MAX),
    };
    if limits.max_instructions == 0 || limits.max_sim_us == 0 {
        bail!("limits must be positive");
    }
    let report = if trace {
        trace_loop(&mut m, limits)?
    } else {
        m.run(limits)?.reason
    };
    let printed = [0u8, 1]
        .iter()
        .map(|&ch| m.devices().printed_text(ch))
        .collect::<Result<Vec<_>, _>>()?
        .concat();
    if trace {
        eprint!("{printed}");
    } else {
        io::stdout().lock().write_all(printed.as_bytes())?;
    }
    if let Some(p) = &args.punch {
        let punched = m
            .devices()
            .punched()
            .map(|t| t.to_bytes())
            .unwrap_or_default();
        fs::write(p, punched).with_context(|| format!("writing {}", p.display()))?;
    }
    let state = m.state().to_text();
    eprint!("{state}");
    if let Some(p) = &args.state {
        fs::write(p, &state).with_context(|| format!("writing {}", p.display()))?;
    }
    match report {
        StopReason::Halted => Ok(ExitCode::SUCCESS),
        other => {
            let why = match other {
                StopReason::Breakpoint(a) => format!("breakpoint at {}", format_address(a)),
                StopReason::BreakInstruction => "BPT instruction".to_string(),
                StopReason::StopRequested => "stop requested".to_string(),
                StopReason::InstructionLimit => {
                    format!("instruction limit {} reached", args.max_instr)
                }
                StopReason::TimeLimit => "simulated time limit reached".to_string(),
                StopReason::Halted => unreachable!(),
            };
            eprintln!("mr: stopped without HLT: {why}");
            Ok(ExitCode::from(2))
        }
    }
}

fn trace_loop(m: &mut Machine, limits: RunLimits) -> Result<StopReason> {
    let mut n = 0;
    let start = m.state().sim_time_us();
    let mut out = io::stdout().lock();
    loop {
        if n >= limits.max_instructions {
            return Ok(StopReason::InstructionLimit);
        }
        if m.state().sim_time_us() - start >= limits.max_sim_us {
            return Ok(StopReason::TimeLimit);
        }
        let r = m.step_instruction()?;
        n += 1;
        writeln!(
            out,
            "{}  {}  {:<12}  acc {}  {} us",
            format_address(r.address),
            r.word,
            m.disassemble(r.word),
            m.state().acc,
            r.elapsed_us
        )?;
        if let Some(w) = r.warning {
            eprintln!("warning: {w}");
        }
        match r.status {
            mr_core::Status::Halted => return Ok(StopReason::Halted),
            mr_core::Status::Paused => return Ok(StopReason::BreakInstruction),
            mr_core::Status::Running => {}
        }
    }
}

fn bench(cli: &Cli, fixture: &str, instructions: u64) -> Result<ExitCode> {
    if fixture != "add-loop" {
        bail!("unknown fixture `{fixture}` (available: add-loop)");
    }
    if instructions == 0 {
        bail!("--instructions must be positive");
    }
    let mut m = machine(cli)?;
    let tape = add_loop_tape(m.isa());
    m.boot_load(&tape)?;
    m.start();
    let wall = Instant::now();
    let r = m.run(RunLimits::instructions(instructions))?;
    let wall = wall.elapsed();
    let rate = r.instructions as f64 * 1e6 / r.elapsed_us as f64;
    println!("{} instructions/sec (simulated)", rate.round() as u64);
    eprintln!(
        "{} instructions in {} us simulated, {:.3} s wall",
        r.instructions,
        r.elapsed_us,
        wall.as_secs_f64()
    );
    Ok(ExitCode::SUCCESS)
}

fn dump(cli: &Cli, file: &Path) -> Result<ExitCode> {
    let (_, isa) = tables(cli)?;
    let mut out = io::stdout().lock();
    let bytes = fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    if bytes.starts_with(TAPE_MAGIC) {
        let tape = TapeImage::from_bytes(&bytes)?;
        let words = decode_tape(&tape)?;
        writeln!(out, "tape: {} frames, {} words", tape.len(), words.len())?;
        for (a, w) in words.iter().enumerate() {
            writeln!(
                out,
                "{}  {}  {}",
                format_address(a as u16),
                w,
                disassemble(*w, &isa)
            )?;
        }
    } else if bytes.starts_with(b"MR-STATE") {
        let state = MachineState::from_text(&String::from_utf8_lossy(&bytes))?;
        writeln!(
            out,
            "pc {}  acc {}  ir {}  ovf {}  {}  {}  t={} us",
            format_address(state.pc()),
            state.acc,
            state.ir,
            state.overflow as u8,
            state.status,
            state.phase.name(),
            state.sim_time_us()
        )?;
        let bps: Vec<_> = state
            .breakpoints
            .iter()
            .map(|&b| format_address(b))
            .collect();
        writeln!(
            out,
            "breakpoints: {}",
            if bps.is_empty() {
                "none".into()
            } else {
                bps.join(" ")
            }
        )?;
        for (a, w) in state
            .memory()
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != Word::ZERO)
        {
            writeln!(
                out,
                "{}  {}  {}",
                format_address(a as u16),
                w,
                disassemble(*w, &isa)
            )?;
        }
    } else {
        bail!(
            "{}: neither an MRT1 tape nor a state snapshot",
            file.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}
