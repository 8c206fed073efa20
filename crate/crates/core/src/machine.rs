//! The emulator core.
//!
//! [`Machine`] owns the registers, the 1024-word core store, the device bank
//! and the simulated clock. It executes by applying microcode rows, so the
//! instruction set is whatever the loaded [`MicroRom`] says it is. Arithmetic
//! goes through [`Alu`], an 18-bit gate-level lookahead adder.
//!
//! The register set (ACC, IR, MAR, MDR, PC, overflow flag) is a minimal
//! reconstruction; only the program counter is attested as panel-visible.
//! Core's destructive read and rewrite is folded into the 8 us memory cycle.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adder::{build_lookahead_adder, AdderPorts, LogicNetwork, MACHINE_GROUP_SIZE};
use crate::devices::{
    decode_tape, DeviceBank, DeviceError, DeviceKind, DeviceRates, Direction, TapeError, TapeImage,
    BOOT_CHANNEL, FRAME_MASK, ROSTER,
};
use crate::isa::{
    decode, format_address, Instruction, IsaError, IsaTable, Semantic, Word, MEMORY_WORDS,
    OPCODE_COUNT, WORD_BITS, WORD_MASK,
};
use crate::microcode::{
    check_against_isa, validate_rom, ControlLine, MicroRom, MicroWord, RomError, RowId, Severity,
};

pub const PLANE_SIDE: usize = 32;
pub const PLANE_COUNT: usize = WORD_BITS as usize;

#[derive(Debug, Error)]
pub enum MachineError {
    #[error("machine is halted; start it before stepping")]
    Halted,
    #[error("machine is not running")]
    NotRunning,
    #[error("boot requires a halted machine")]
    NotHalted,
    #[error("run limits must be positive")]
    ZeroLimit,
    #[error("I/O fault at {}: {source}", format_address(*.address))]
    Device {
        address: u16,
        #[source]
        source: DeviceError,
    },
    #[error(transparent)]
    DeviceSetup(#[from] DeviceError),
    #[error("boot tape: {0}")]
    Tape(#[from] TapeError),
    #[error("boot tape is empty")]
    EmptyTape,
    #[error("boot tape holds {0} words; core has {MEMORY_WORDS}")]
    OversizedTape(usize),
    #[error("plane {0} out of range 0..18")]
    PlaneIndex(usize),
    #[error("address {0:o} out of range")]
    Address(u32),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Rom(#[from] RomError),
    #[error(transparent)]
    Isa(#[from] IsaError),
    #[error("state snapshot line {line}: {message}")]
    Snapshot { line: usize, message: String },
}

/// The one machine this crate models. Only device rates may vary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineConfig {
    pub word_bits: u32,
    pub memory_words: usize,
    pub plane_rows: usize,
    pub plane_cols: usize,
    pub planes: usize,
    pub double_sided: bool,
    pub instruction_count: usize,
    /// Microword durations, short then long.
    pub cycle_us: [u64; 2],
    pub roster: Vec<(u8, DeviceKind, &'static str)>,
    pub rates: DeviceRates,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            word_bits: 18,
            memory_words: 1024,
            plane_rows: 32,
            plane_cols: 32,
            planes: 18,
            double_sided: false,
            instruction_count: 32,
            cycle_us: [4, 8],
            roster: ROSTER.to_vec(),
            rates: DeviceRates::default(),
        }
    }
}

impl MachineConfig {
    pub fn with_rates(rates: DeviceRates) -> Self {
        MachineConfig {
            rates,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), MachineError> {
        let fixed = MachineConfig::with_rates(self.rates);
        let checks: [(&str, bool); 8] = [
            (
                "word width must be 18 bits",
                self.word_bits == fixed.word_bits,
            ),
            (
                "memory must be 1024 words",
                self.memory_words == fixed.memory_words,
            ),
            (
                "planes must be 32x32",
                self.plane_rows == fixed.plane_rows && self.plane_cols == fixed.plane_cols,
            ),
            ("one plane per word bit (18)", self.planes == fixed.planes),
            ("planes are single-sided", !self.double_sided),
            (
                "instruction set has 32 entries",
                self.instruction_count == fixed.instruction_count,
            ),
            (
                "microword cycles are 4 and 8 us",
                self.cycle_us == fixed.cycle_us,
            ),
            ("device roster is fixed", self.roster == fixed.roster),
        ];
        if let Some((msg, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Err(MachineError::Config(msg.to_string()));
        }
        if self.plane_rows * self.plane_cols != self.memory_words
            || self.planes as u32 != self.word_bits
        {
            return Err(MachineError::Config(
                "plane geometry does not cover memory".into(),
            ));
        }
        self.rates.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Halted,
    Running,
    Paused,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Halted => "halted",
            Status::Running => "running",
            Status::Paused => "paused",
        }
    }

    fn parse(s: &str) -> Option<Status> {
        match s {
            "halted" => Some(Status::Halted),
            "running" => Some(Status::Running),
            "paused" => Some(Status::Paused),
            _ => None,
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which microword comes next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Fetch,
    Execute,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Fetch => "fetch",
            Phase::Execute => "execute",
        }
    }
}

/// Registers, core and clock. Plain data; compare with `==` for determinism checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineState {
    pub acc: Word,
    pc: u16,
    pub ir: Word,
    mar: u16,
    pub mdr: Word,
    memory: Vec<Word>,
    pub overflow: bool,
    pub status: Status,
    pub phase: Phase,
    pub breakpoints: BTreeSet<u16>,
    sim_time_us: u64,
}

impl Default for MachineState {
    fn default() -> Self {
        MachineState {
            acc: Word::ZERO,
            pc: 0,
            ir: Word::ZERO,
            mar: 0,
            mdr: Word::ZERO,
            memory: vec![Word::ZERO; MEMORY_WORDS],
            overflow: false,
            status: Status::Halted,
            phase: Phase::Fetch,
            breakpoints: BTreeSet::new(),
            sim_time_us: 0,
        }
    }
}

fn check_address(addr: u16) -> Result<u16, MachineError> {
    if (addr as usize) < MEMORY_WORDS {
        Ok(addr)
    } else {
        Err(MachineError::Address(addr as u32))
    }
}

impl MachineState {
    pub fn pc(&self) -> u16 {
        self.pc
    }

    pub fn mar(&self) -> u16 {
        self.mar
    }

    pub fn sim_time_us(&self) -> u64 {
        self.sim_time_us
    }

    pub fn memory(&self) -> &[Word] {
        &self.memory
    }

    pub fn read(&self, addr: u16) -> Word {
        self.memory[addr as usize % MEMORY_WORDS]
    }

    /// SHA-256 over the memory image, words as big-endian u32.
    pub fn memory_digest(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.memory {
            h.update(w.value().to_be_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn plane_view(&self, plane: usize) -> Result<PlaneView, MachineError> {
        if plane >= PLANE_COUNT {
            return Err(MachineError::PlaneIndex(plane));
        }
        let mut bits = [[false; PLANE_SIDE]; PLANE_SIDE];
        for (addr, w) in self.memory.iter().enumerate() {
            bits[addr / PLANE_SIDE][addr % PLANE_SIDE] = w.bit(plane as u32);
        }
        Ok(PlaneView {
            plane: plane as u8,
            bits,
        })
    }

    /// Text snapshot: registers in octal, then 32 lines of 32 memory words.
    pub fn to_text(&self) -> String {
        let mut s = String::from("MR-STATE 1\n");
        writeln!(s, "PC {}", format_address(self.pc)).unwrap();
        writeln!(s, "ACC {}", self.acc).unwrap();
        writeln!(s, "IR {}", self.ir).unwrap();
        writeln!(s, "MAR {}", format_address(self.mar)).unwrap();
        writeln!(s, "MDR {}", self.mdr).unwrap();
        writeln!(s, "OVF {}", self.overflow as u8).unwrap();
        writeln!(s, "STATUS {}", self.status).unwrap();
        writeln!(s, "PHASE {}", self.phase.name()).unwrap();
        writeln!(s, "TIME {}", self.sim_time_us).unwrap();
        s.push_str("BREAKPOINTS");
        for b in &self.breakpoints {
            s.push(' ');
            s.push_str(&format_address(*b));
        }
        s.push('\n');
        for (row, chunk) in self.memory.chunks(PLANE_SIDE).enumerate() {
            s.push_str(&format_address((row * PLANE_SIDE) as u16));
            for w in chunk {
                s.push(' ');
                s.push_str(&w.to_string());
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<MachineState, MachineError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let bad = |line: usize, message: &str| MachineError::Snapshot {
            line,
            message: message.to_string(),
        };
        let mut next = |key: &str| -> Result<(usize, Vec<String>), MachineError> {
            let (n, l) = lines.next().ok_or_else(|| bad(0, "truncated snapshot"))?;
            let mut toks = l.split_whitespace();
            if toks.next() != Some(key) {
                return Err(bad(n, &format!("expected {key}")));
            }
            Ok((n, toks.map(str::to_string).collect()))
        };
        let one = |(n, v): (usize, Vec<String>)| -> Result<(usize, String), MachineError> {
            match v.as_slice() {
                [x] => Ok((n, x.clone())),
                _ => Err(bad(n, "expected one value")),
            }
        };
        let (n, magic) = one(next("MR-STATE")?)?;
        if magic != "1" {
            return Err(bad(n, "unsupported snapshot version"));
        }
        let addr = |(n, v): (usize, String)| {
            crate::isa::parse_address(&v).map_err(|e| bad(n, &e.to_string()))
        };
        let word =
            |(n, v): (usize, String)| Word::parse_octal(&v).map_err(|e| bad(n, &e.to_string()));
        let mut st = MachineState {
            pc: addr(one(next("PC")?)?)?,
            acc: word(one(next("ACC")?)?)?,
            ir: word(one(next("IR")?)?)?,
            mar: addr(one(next("MAR")?)?)?,
            mdr: word(one(next("MDR")?)?)?,
            ..Default::default()
        };
        let (n, ovf) = one(next("OVF")?)?;
        st.overflow = match ovf.as_str() {
            "0" => false,
            "1" => true,
            _ => return Err(bad(n, "OVF must be 0 or 1")),
        };
        let (n, status) = one(next("STATUS")?)?;
        st.status = Status::parse(&status).ok_or_else(|| bad(n, "unknown status"))?;
        let (n, phase) = one(next("PHASE")?)?;
        st.phase = match phase.as_str() {
            "fetch" => Phase::Fetch,
            "execute" => Phase::Execute,
            _ => return Err(bad(n, "unknown phase")),
        };
        let (n, time) = one(next("TIME")?)?;
        st.sim_time_us = time.parse().map_err(|_| bad(n, "bad TIME"))?;
        let (n, bps) = next("BREAKPOINTS")?;
        for b in bps {
            st.breakpoints.insert(addr((n, b))?);
        }
        for row in 0..PLANE_SIDE {
            let expect = format_address((row * PLANE_SIDE) as u16);
            let (n, words) = next(&expect)?;
            if words.len() != PLANE_SIDE {
                return Err(bad(n, "memory rows hold 32 words"));
            }
            for (col, w) in words.into_iter().enumerate() {
                st.memory[row * PLANE_SIDE + col] = word((n, w))?;
            }
        }
        Ok(st)
    }
}

/// One bit plane of core: `bits[y][x]` is bit `plane` of word `32*y + x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaneView {
    pub plane: u8,
    pub bits: [[bool; PLANE_SIDE]; PLANE_SIDE],
}

impl PlaneView {
    pub fn lit(&self, x: usize, y: usize) -> bool {
        self.bits[y][x]
    }

    pub fn lit_count(&self) -> usize {
        self.bits.iter().flatten().filter(|&&b| b).count()
    }

    /// Rows top to bottom, `'1'` for a lit core, column 0 first.
    pub fn rows(&self) -> Vec<String> {
        self.bits
            .iter()
            .map(|r| r.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }
}

/// 18-bit adder built from gates.
#[derive(Debug, Clone)]
pub struct Alu {
    net: Arc<LogicNetwork>,
    ports: AdderPorts,
    lanes: Vec<u64>,
    scratch: Vec<u64>,
    out: Vec<u64>,
}

impl Default for Alu {
    fn default() -> Self {
        Alu::new()
    }
}

impl Alu {
    pub fn new() -> Alu {
        let net = build_lookahead_adder(WORD_BITS as usize, MACHINE_GROUP_SIZE)
            .expect("valid adder parameters");
        Alu::from_network(Arc::new(net)).expect("generated adder has standard ports")
    }

    pub fn from_network(net: Arc<LogicNetwork>) -> Result<Alu, crate::adder::NetworkError> {
        let ports = AdderPorts::resolve(&net, WORD_BITS as usize)?;
        Ok(Alu {
            lanes: vec![0; net.inputs().len()],
            out: vec![0; net.outputs().len()],
            scratch: Vec::with_capacity(net.inputs().len() + net.gate_count()),
            ports,
            net,
        })
    }

    pub fn network(&self) -> &LogicNetwork {
        &self.net
    }

    /// `a + b + cin` through the gates; returns the 18-bit sum and carry out.
    pub fn add(&mut self, a: Word, b: Word, carry_in: bool) -> (Word, bool) {
        let (a, b) = (a.value(), b.value());
        for bit in 0..self.ports.width {
            self.lanes[self.ports.a[bit]] = ((a >> bit) & 1) as u64;
            self.lanes[self.ports.b[bit]] = ((b >> bit) & 1) as u64;
        }
        self.lanes[self.ports.carry_in] = carry_in as u64;
        self.net
            .evaluate_lanes_into(&self.lanes, &mut self.scratch, &mut self.out)
            .expect("lane counts fixed at construction");
        let (sum, carry) = self.ports.unpack(&self.out, 0);
        (Word::new(sum as u32), carry)
    }

    /// Signed sum and overflow flag.
    pub fn add_signed(&mut self, a: Word, b: Word) -> (Word, bool) {
        let (r, _) = self.add(a, b, false);
        (r, signed_overflow(a, b, r))
    }

    /// `a - b` as `a + !b + 1`.
    pub fn sub_signed(&mut self, a: Word, b: Word) -> (Word, bool) {
        let nb = Word::new(!b.value());
        let (r, _) = self.add(a, nb, true);
        (r, signed_overflow(a, nb, r))
    }
}

fn signed_overflow(a: Word, b: Word, r: Word) -> bool {
    a.is_negative() == b.is_negative() && r.is_negative() != a.is_negative()
}

/// Requests delivered to a machine from another thread; applied between microwords.
#[derive(Debug, Clone)]
pub enum Control {
    SetBreakpoint(u16),
    ClearBreakpoint(u16),
    Stop,
    Mount(u8, TapeImage),
}

/// Sending side of a machine's command queue.
#[derive(Debug, Clone)]
pub struct ControlHandle(Sender<Control>);

impl ControlHandle {
    /// Returns `false` once the machine has been dropped.
    pub fn send(&self, c: Control) -> bool {
        self.0.send(c).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MicroEvent {
    /// Address of the instruction this microword belongs to.
    pub address: u16,
    pub row: RowId,
    pub duration_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepReport {
    pub address: u16,
    pub word: Word,
    pub instruction: Instruction,
    pub microwords: u32,
    /// Microword time only.
    pub micro_us: u64,
    /// Device transfer time charged by this instruction.
    pub device_us: u64,
    pub elapsed_us: u64,
    pub status: Status,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroReport {
    pub event: MicroEvent,
    pub device_us: u64,
    pub completed: Option<StepReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunLimits {
    pub max_instructions: u64,
    pub max_sim_us: u64,
}

impl RunLimits {
    pub fn instructions(n: u64) -> RunLimits {
        RunLimits {
            max_instructions: n,
            max_sim_us: u64::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Halted,
    Breakpoint(u16),
    BreakInstruction,
    StopRequested,
    InstructionLimit,
    TimeLimit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunReport {
    pub reason: StopReason,
    pub instructions: u64,
    pub elapsed_us: u64,
    pub status: Status,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootReport {
    pub words: usize,
    pub frames: usize,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, Copy)]
struct Checkpoint {
    acc: Word,
    pc: u16,
    ir: Word,
    mar: u16,
    mdr: Word,
    overflow: bool,
    sim_time_us: u64,
}

#[derive(Debug)]
pub struct Machine {
    config: MachineConfig,
    state: MachineState,
    rom: Arc<MicroRom>,
    isa: Arc<IsaTable>,
    alu: Alu,
    devices: DeviceBank,
    /// Set by `start` so the first fetch after a breakpoint pause proceeds.
    resume_past_breakpoint: bool,
    in_flight: Option<(Checkpoint, u64)>,
    control_tx: Sender<Control>,
    control_rx: Receiver<Control>,
    micro_trace: Option<Vec<MicroEvent>>,
    instructions: u64,
}

impl Machine {
    pub fn new(config: MachineConfig) -> Result<Machine, MachineError> {
        Machine::with_tables(
            config,
            Arc::new(MicroRom::default_rom()),
            Arc::new(IsaTable::default_table()),
        )
    }

    /// Builds a machine on a given microcode and instruction table, which must
    /// pass validation and agree on execute durations.
    pub fn with_tables(
        config: MachineConfig,
        rom: Arc<MicroRom>,
        isa: Arc<IsaTable>,
    ) -> Result<Machine, MachineError> {
        config.validate()?;
        let mut problems: Vec<_> = validate_rom(&rom)
            .into_iter()
            .filter(|d| d.severity == Severity::Error)
            .collect();
        problems.extend(check_against_isa(&rom, &isa));
        if !problems.is_empty() {
            return Err(RomError(problems).into());
        }
        let devices = DeviceBank::new(config.rates)?;
        let (control_tx, control_rx) = mpsc::channel();
        Ok(Machine {
            config,
            state: MachineState::default(),
            rom,
            isa,
            alu: Alu::new(),
            devices,
            resume_past_breakpoint: false,
            in_flight: None,
            control_tx,
            control_rx,
            micro_trace: None,
            instructions: 0,
        })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn state(&self) -> &MachineState {
        &self.state
    }

    pub fn snapshot(&self) -> MachineState {
        self.state.clone()
    }

    pub fn rom(&self) -> &MicroRom {
        &self.rom
    }

    pub fn isa(&self) -> &IsaTable {
        &self.isa
    }

    pub fn alu(&self) -> &Alu {
        &self.alu
    }

    pub fn devices(&self) -> &DeviceBank {
        &self.devices
    }

    pub fn devices_mut(&mut self) -> &mut DeviceBank {
        &mut self.devices
    }

    /// Instructions completed since construction or the last reset.
    pub fn instructions_executed(&self) -> u64 {
        self.instructions
    }

    pub fn control_handle(&self) -> ControlHandle {
        ControlHandle(self.control_tx.clone())
    }

    /// Clears core and registers, rewinds readers and empties printer and punch output.
    pub fn reset(&mut self) {
        self.state = MachineState::default();
        let mounted: Vec<(u8, TapeImage)> = self
            .devices
            .channels()
            .filter_map(|c| match &c.medium {
                crate::devices::Medium::Reader { tape: Some(t), .. } => Some((c.id, t.clone())),
                _ => None,
            })
            .collect();
        self.devices = DeviceBank::new(self.config.rates).expect("rates validated");
        for (id, tape) in mounted {
            self.devices.mount(id, tape).expect("reader channel");
        }
        self.resume_past_breakpoint = false;
        self.in_flight = None;
        self.instructions = 0;
    }

    /// Operator start: a halted or paused machine becomes running.
    pub fn start(&mut self) {
        if self.state.status != Status::Running {
            self.state.status = Status::Running;
            self.resume_past_breakpoint = true;
        }
    }

    /// Operator stop: a running machine pauses.
    pub fn stop(&mut self) {
        if self.state.status == Status::Running {
            self.state.status = Status::Paused;
        }
    }

    pub fn set_breakpoint(&mut self, addr: u16) -> Result<(), MachineError> {
        self.state.breakpoints.insert(check_address(addr)?);
        Ok(())
    }

    pub fn clear_breakpoint(&mut self, addr: u16) -> Result<(), MachineError> {
        self.state.breakpoints.remove(&check_address(addr)?);
        Ok(())
    }

    pub fn deposit(&mut self, addr: u16, word: Word) -> Result<(), MachineError> {
        self.state.memory[check_address(addr)? as usize] = word;
        Ok(())
    }

    pub fn examine(&self, addr: u16) -> Result<Word, MachineError> {
        Ok(self.state.memory[check_address(addr)? as usize])
    }

    /// Loads the program counter from the panel switches. Abandons any
    /// half-executed instruction.
    pub fn set_pc(&mut self, addr: u16) -> Result<(), MachineError> {
        self.state.pc = check_address(addr)?;
        self.state.phase = Phase::Fetch;
        self.in_flight = None;
        Ok(())
    }

    pub fn set_acc(&mut self, w: Word) {
        self.state.acc = w;
    }

    /// Replaces the whole state, e.g. from a snapshot file.
    pub fn restore(&mut self, state: MachineState) {
        self.state = state;
        self.in_flight = None;
        self.resume_past_breakpoint = false;
    }

    pub fn plane_view(&self, plane: usize) -> Result<PlaneView, MachineError> {
        self.state.plane_view(plane)
    }

    pub fn mount(&mut self, channel: u8, tape: TapeImage) -> Result<(), MachineError> {
        Ok(self.devices.mount(channel, tape)?)
    }

    pub fn enable_micro_trace(&mut self) {
        self.micro_trace.get_or_insert_with(Vec::new);
    }

    pub fn take_micro_trace(&mut self) -> Vec<MicroEvent> {
        self.micro_trace
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    /// Applies queued control requests. Returns true if a stop was requested.
    fn drain_controls(&mut self) -> bool {
        let mut stop = false;
        while let Ok(c) = self.control_rx.try_recv() {
            match c {
                Control::SetBreakpoint(a) => {
                    let _ = self.set_breakpoint(a);
                }
                Control::ClearBreakpoint(a) => {
                    let _ = self.clear_breakpoint(a);
                }
                Control::Stop => {
                    stop = true;
                    self.stop();
                }
                Control::Mount(ch, tape) => {
                    let _ = self.devices.mount(ch, tape);
                }
            }
        }
        stop
    }

    /// Deposits tape words from address 0 upward without executing anything.
    /// The transfer is charged at the fast reader's rate.
    pub fn boot_load(&mut self, tape: &TapeImage) -> Result<BootReport, MachineError> {
        if self.state.status != Status::Halted {
            return Err(MachineError::NotHalted);
        }
        let words = decode_tape(tape)?;
        if words.is_empty() {
            return Err(MachineError::EmptyTape);
        }
        if words.len() > MEMORY_WORDS {
            return Err(MachineError::OversizedTape(words.len()));
        }
        let per_frame = self.devices.channel(BOOT_CHANNEL)?.frame_time_us();
        self.state.memory[..words.len()].copy_from_slice(&words);
        let elapsed_us = per_frame * tape.len() as u64;
        self.state.sim_time_us += elapsed_us;
        self.state.pc = 0;
        self.state.phase = Phase::Fetch;
        self.in_flight = None;
        Ok(BootReport {
            words: words.len(),
            frames: tape.len(),
            elapsed_us,
        })
    }

    /// Boots from the unread part of the tape on the fast reader, consuming it.
    pub fn boot_from_reader(&mut self) -> Result<BootReport, MachineError> {
        if self.state.status != Status::Halted {
            return Err(MachineError::NotHalted);
        }
        let rest = match &self.devices.channel(BOOT_CHANNEL)?.medium {
            crate::devices::Medium::Reader {
                tape: Some(t),
                position,
            } => t.frames()[*position..].to_vec(),
            _ => return Err(DeviceError::NoTape(BOOT_CHANNEL).into()),
        };
        let tape = TapeImage::new(rest, crate::devices::Provenance::Imported)?;
        let report = self.boot_load(&tape)?;
        self.devices.take_all(BOOT_CHANNEL)?;
        Ok(report)
    }

    fn checkpoint(&self) -> Checkpoint {
        let s = &self.state;
        Checkpoint {
            acc: s.acc,
            pc: s.pc,
            ir: s.ir,
            mar: s.mar,
            mdr: s.mdr,
            overflow: s.overflow,
            sim_time_us: s.sim_time_us,
        }
    }

    fn rollback(&mut self, c: Checkpoint) {
        let s = &mut self.state;
        s.acc = c.acc;
        s.pc = c.pc;
        s.ir = c.ir;
        s.mar = c.mar;
        s.mdr = c.mdr;
        s.overflow = c.overflow;
        s.sim_time_us = c.sim_time_us;
        s.phase = Phase::Fetch;
    }

    /// Applies one row of control lines. Returns device time spent.
    fn apply_row(&mut self, row: MicroWord) -> Result<u64, DeviceError> {
        use ControlLine::*;
        let l = row.lines;
        let s = &mut self.state;
        let ins = decode(s.ir);

        if l.has(MarFromPc) {
            s.mar = s.pc;
        }
        if l.has(MarFromAddr) {
            s.mar = ins.address;
        }

        let mut device_us = 0;
        let mut input = None;
        if l.has(IoStrobe) {
            let dir = if l.has(AccLoad) {
                Direction::Input
            } else {
                Direction::Output
            };
            let t =
                self.devices
                    .io_transfer(ins.modifier, dir, (s.acc.value() as u8) & FRAME_MASK)?;
            device_us = t.elapsed_us;
            if dir == Direction::Input {
                input = Some(t.frame);
            }
        }

        let mar = s.mar as usize;
        if l.has(MemRead) {
            s.mdr = s.memory[mar];
        }
        if l.has(AccToMdr) {
            s.mdr = s.acc;
        }
        if l.has(MemWrite) {
            s.memory[mar] = if l.has(AddrFieldWrite) {
                s.memory[mar].with_address_field(s.acc.address_field())
            } else {
                s.mdr
            };
        }
        if l.has(IrLoad) {
            s.ir = s.mdr;
        }
        if l.has(PcIncrement) {
            s.pc = (s.pc + 1) % MEMORY_WORDS as u16;
        }

        let bus = if let Some(op) = l.alu_op() {
            let (acc, mdr) = (s.acc, s.mdr);
            let (value, ovf) = match op {
                AluAdd => self.alu.add_signed(acc, mdr),
                AluSub => self.alu.sub_signed(acc, mdr),
                AluAnd => (Word::new(acc.value() & mdr.value()), false),
                AluIor => (Word::new(acc.value() | mdr.value()), false),
                AluXor => (Word::new(acc.value() ^ mdr.value()), false),
                AluShl => (
                    Word::new(acc.value() << 1),
                    acc.bit(WORD_BITS - 1) != acc.bit(WORD_BITS - 2),
                ),
                AluShr => {
                    let fill = if l.has(CondNeg) {
                        acc.value() & (1 << (WORD_BITS - 1))
                    } else {
                        0
                    };
                    (Word::new((acc.value() >> 1) | fill), false)
                }
                _ => unreachable!("alu_op returns ALU lines only"),
            };
            if ovf && l.has(CondOvf) && !l.has(PcFromAddr) {
                s.overflow = true;
            }
            Some(value)
        } else if l.has(MdrToAcc) {
            Some(s.mdr)
        } else {
            input.map(|f| Word::new(f as u32))
        };
        if l.has(AccLoad) {
            if let Some(v) = bus {
                s.acc = v;
            }
        }
        if l.has(AccClear) {
            s.acc = Word::ZERO;
        }
        if l.has(AccComplement) {
            s.acc = Word::new(!s.acc.value() & WORD_MASK);
        }

        if l.has(PcFromAddr) {
            let mut take = true;
            if l.has(CondZero) {
                take &= s.acc == Word::ZERO;
            }
            if l.has(CondNeg) {
                take &= s.acc.is_negative();
            }
            if l.has(CondOvf) {
                take &= s.overflow;
                s.overflow = false;
            }
            if take {
                s.pc = ins.address;
            }
        }
        if l.has(Halt) {
            s.status = Status::Halted;
        }
        if l.has(Break) {
            s.status = Status::Paused;
        }
        s.sim_time_us += row.duration_us + device_us;
        Ok(device_us)
    }

    /// Applies the next microword (fetch or execute).
    pub fn step_micro(&mut self) -> Result<MicroReport, MachineError> {
        if self.state.status == Status::Halted {
            return Err(MachineError::Halted);
        }
        match self.state.phase {
            Phase::Fetch => {
                let cp = self.checkpoint();
                let address = self.state.pc;
                let row = self.rom.fetch;
                self.apply_row(row).expect("fetch row performs no I/O");
                self.state.phase = Phase::Execute;
                self.in_flight = Some((cp, 0));
                let event = MicroEvent {
                    address,
                    row: RowId::Fetch,
                    duration_us: row.duration_us,
                };
                if let Some(t) = &mut self.micro_trace {
                    t.push(event);
                }
                Ok(MicroReport {
                    event,
                    device_us: 0,
                    completed: None,
                })
            }
            Phase::Execute => {
                let (cp, _) = self.in_flight.take().unwrap_or((self.checkpoint(), 0));
                let ins = decode(self.state.ir);
                let row = self.rom.execute[ins.opcode as usize];
                let device_us = match self.apply_row(row) {
                    Ok(us) => us,
                    Err(source) => {
                        // Leave the machine as it was before the fetch, stopped.
                        self.rollback(cp);
                        self.state.status = Status::Halted;
                        return Err(MachineError::Device {
                            address: cp.pc,
                            source,
                        });
                    }
                };
                self.state.phase = Phase::Fetch;
                self.instructions += 1;
                let event = MicroEvent {
                    address: cp.pc,
                    row: RowId::Execute(ins.opcode),
                    duration_us: row.duration_us,
                };
                if let Some(t) = &mut self.micro_trace {
                    t.push(event);
                }
                let entry = self.isa.entry(ins.opcode);
                let warning = (entry.semantic == Semantic::Spare).then(|| {
                    format!(
                        "spare opcode {:02o} ({}) at {} executed as no-op",
                        ins.opcode,
                        entry.mnemonic,
                        format_address(cp.pc)
                    )
                });
                let elapsed_us = self.state.sim_time_us - cp.sim_time_us;
                let completed = StepReport {
                    address: cp.pc,
                    word: self.state.ir,
                    instruction: ins,
                    microwords: 2,
                    micro_us: elapsed_us - device_us,
                    device_us,
                    elapsed_us,
                    status: self.state.status,
                    warning,
                };
                Ok(MicroReport {
                    event,
                    device_us,
                    completed: Some(completed),
                })
            }
        }
    }

    /// Executes one whole instruction: its fetch and execute microwords.
    pub fn step_instruction(&mut self) -> Result<StepReport, MachineError> {
        loop {
            let r = self.step_micro()?;
            if let Some(done) = r.completed {
                return Ok(done);
            }
        }
    }

    /// Runs until HLT, a breakpoint, a BPT, a stop request, or a limit.
    /// Breakpoints are checked before each fetch; queued control requests
    /// are applied between microwords.
    pub fn run(&mut self, limits: RunLimits) -> Result<RunReport, MachineError> {
        if limits.max_instructions == 0 || limits.max_sim_us == 0 {
            return Err(MachineError::ZeroLimit);
        }
        if self.state.status != Status::Running {
            return Err(MachineError::NotRunning);
        }
        let start_time = self.state.sim_time_us;
        let mut executed = 0u64;
        let mut warnings = Vec::new();
        let reason = loop {
            if self.drain_controls() {
                break StopReason::StopRequested;
            }
            if self.state.phase == Phase::Fetch {
                if executed >= limits.max_instructions {
                    break StopReason::InstructionLimit;
                }
                if self.state.sim_time_us - start_time >= limits.max_sim_us {
                    break StopReason::TimeLimit;
                }
                let pc = self.state.pc;
                if !self.resume_past_breakpoint && self.state.breakpoints.contains(&pc) {
                    self.state.status = Status::Paused;
                    break StopReason::Breakpoint(pc);
                }
                self.resume_past_breakpoint = false;
            }
            let r = self.step_micro()?;
            if let Some(done) = r.completed {
                executed += 1;
                if let Some(w) = done.warning {
                    warnings.push(w);
                }
                match self.state.status {
                    Status::Halted => break StopReason::Halted,
                    Status::Paused => break StopReason::BreakInstruction,
                    Status::Running => {}
                }
            }
        };
        Ok(RunReport {
            reason,
            instructions: executed,
            elapsed_us: self.state.sim_time_us - start_time,
            status: self.state.status,
            warnings,
        })
    }

    /// Disassembly of one word with this machine's table.
    pub fn disassemble(&self, w: Word) -> String {
        crate::isa::disassemble(w, &self.isa)
    }
}

/// Number of rows in the execute table, for callers iterating opcodes.
pub const EXECUTE_ROWS: usize = OPCODE_COUNT;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{encode, Instruction};

    fn ins(m: &str, addr: u16) -> Word {
        let isa = IsaTable::default_table();
        let op = isa.by_mnemonic(m).unwrap().opcode;
        encode(Instruction::new(op as u32, 0, addr as u32).unwrap()).unwrap()
    }

    fn io(m: &str, ch: u8) -> Word {
        let isa = IsaTable::default_table();
        let op = isa.by_mnemonic(m).unwrap().opcode;
        encode(Instruction::new(op as u32, ch as u32, 0).unwrap()).unwrap()
    }

    fn machine() -> Machine {
        Machine::new(MachineConfig::default()).unwrap()
    }

    #[test]
    fn config_rejects_other_machines() {
        assert!(MachineConfig::default().validate().is_ok());
        for c in [
            MachineConfig {
                memory_words: 4096,
                ..MachineConfig::default()
            },
            MachineConfig {
                word_bits: 36,
                ..MachineConfig::default()
            },
            MachineConfig {
                double_sided: true,
                ..MachineConfig::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
        let mut c = MachineConfig::default();
        c.roster.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn reset_then_step_halts_at_12us() {
        let mut m = machine();
        assert_eq!(m.state().status, Status::Halted);
        assert!(matches!(m.step_instruction(), Err(MachineError::Halted)));
        m.start();
        let r = m.step_instruction().unwrap();
        assert_eq!(r.instruction.opcode, 0);
        assert_eq!(r.status, Status::Halted);
        assert_eq!(m.state().sim_time_us(), 12);
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = machine();
        a.deposit(5, Word::new(7)).unwrap();
        a.reset();
        let mut b = machine();
        b.reset();
        b.reset();
        assert_eq!(a.state(), b.state());
        for p in 0..PLANE_COUNT {
            assert_eq!(a.plane_view(p).unwrap().lit_count(), 0);
        }
    }

    #[test]
    fn add_from_memory() {
        let mut m = machine();
        m.deposit(0, ins("ADD", 0o144)).unwrap();
        m.deposit(0o144, Word::new(7)).unwrap();
        m.set_acc(Word::new(5));
        m.start();
        let r = m.step_instruction().unwrap();
        assert_eq!(m.state().acc, Word::new(12));
        assert!(!m.state().overflow);
        assert_eq!(r.elapsed_us, 16);
    }

    #[test]
    fn jpz_taken() {
        let mut m = machine();
        m.deposit(0, ins("JPZ", 0o200)).unwrap();
        m.start();
        let r = m.step_instruction().unwrap();
        assert_eq!(m.state().pc(), 0o200);
        assert_eq!(r.elapsed_us, 12);
    }

    #[test]
    fn overflow_then_jov() {
        let mut m = machine();
        m.deposit(0, ins("ADD", 0o10)).unwrap();
        m.deposit(1, ins("JOV", 0o40)).unwrap();
        m.deposit(0o10, Word::new(1)).unwrap();
        m.set_acc(Word::new((1 << 17) - 1));
        m.start();
        m.step_instruction().unwrap();
        assert!(m.state().overflow);
        assert_eq!(m.state().acc.to_signed(), -(1 << 17));
        m.step_instruction().unwrap();
        assert_eq!(m.state().pc(), 0o40);
        assert!(!m.state().overflow);
    }

    #[test]
    fn sas_patches_only_address_field() {
        let mut m = machine();
        m.deposit(0, ins("SAS", 200)).unwrap();
        m.deposit(200, ins("JMP", 0)).unwrap();
        m.set_acc(Word::new(0o42));
        m.start();
        m.step_instruction().unwrap();
        assert_eq!(m.examine(200).unwrap(), ins("JMP", 0o42));
        // idempotent
        let before = m.state().memory_digest();
        m.set_pc(0).unwrap();
        m.step_instruction().unwrap();
        assert_eq!(m.state().memory_digest(), before);
    }

    #[test]
    fn shifts() {
        let mut m = machine();
        for (i, mne) in ["SHR", "LSR", "SHL", "LSL"].iter().enumerate() {
            m.deposit(i as u16, ins(mne, 0)).unwrap();
        }
        m.set_acc(Word::new(0o400002));
        m.start();
        m.step_instruction().unwrap();
        assert_eq!(m.state().acc, Word::new(0o600001));
        m.step_instruction().unwrap();
        assert_eq!(m.state().acc, Word::new(0o300000));
        m.step_instruction().unwrap();
        assert_eq!(m.state().acc, Word::new(0o600000));
        assert!(m.state().overflow);
        m.step_instruction().unwrap();
        assert_eq!(m.state().acc, Word::new(0o400000));
    }

    #[test]
    fn io_fault_rolls_back() {
        let mut m = machine();
        m.deposit(0, io("RDC", 4)).unwrap();
        m.start();
        let e = m.step_instruction().unwrap_err();
        assert!(matches!(
            e,
            MachineError::Device {
                address: 0,
                source: DeviceError::NoTape(4)
            }
        ));
        assert_eq!(m.state().pc(), 0);
        assert_eq!(m.state().sim_time_us(), 0);
        assert_eq!(m.state().status, Status::Halted);
        m.mount(
            4,
            TapeImage::new(vec![17], crate::devices::Provenance::Imported).unwrap(),
        )
        .unwrap();
        m.start();
        let r = m.step_instruction().unwrap();
        assert_eq!(m.state().acc, Word::new(17));
        assert_eq!(r.device_us, 5_000);
        assert_eq!(r.micro_us, 12);
    }

    #[test]
    fn unassigned_channel_faults() {
        let mut m = machine();
        m.deposit(0, io("WRC", 6)).unwrap();
        m.start();
        assert!(matches!(
            m.step_instruction(),
            Err(MachineError::Device {
                source: DeviceError::Unassigned(6),
                ..
            })
        ));
    }

    #[test]
    fn spare_opcode_warns() {
        let mut m = machine();
        m.deposit(0, Word::new(0o30 << 13)).unwrap();
        m.start();
        let r = m.step_instruction().unwrap();
        assert!(r.warning.unwrap().contains("spare"));
        assert_eq!(m.state().pc(), 1);
    }

    #[test]
    fn plane_mapping() {
        let mut m = machine();
        m.deposit(0, Word::new(1)).unwrap();
        m.deposit(33, Word::new(2)).unwrap();
        let p0 = m.plane_view(0).unwrap();
        assert!(p0.lit(0, 0));
        assert_eq!(p0.lit_count(), 1);
        for p in 1..PLANE_COUNT {
            assert!(!m.plane_view(p).unwrap().lit(0, 0));
        }
        assert!(m.plane_view(1).unwrap().lit(1, 1));
        assert!(matches!(
            m.plane_view(18),
            Err(MachineError::PlaneIndex(18))
        ));
    }

    #[test]
    fn run_limits() {
        let mut m = machine();
        m.deposit(0, ins("JMP", 0)).unwrap();
        m.start();
        assert!(matches!(
            m.run(RunLimits::instructions(0)),
            Err(MachineError::ZeroLimit)
        ));
        let r = m.run(RunLimits::instructions(100)).unwrap();
        assert_eq!(r.reason, StopReason::InstructionLimit);
        assert_eq!(r.instructions, 100);
        assert_eq!(r.status, Status::Running);
        let r = m
            .run(RunLimits {
                max_instructions: u64::MAX,
                max_sim_us: 120,
            })
            .unwrap();
        assert_eq!(r.reason, StopReason::TimeLimit);
        assert_eq!(r.elapsed_us, 120);
    }

    #[test]
    fn run_requires_start() {
        let mut m = machine();
        assert!(matches!(
            m.run(RunLimits::instructions(1)),
            Err(MachineError::NotRunning)
        ));
    }

    #[test]
    fn bpt_pauses() {
        let mut m = machine();
        m.deposit(0, ins("NOP", 0)).unwrap();
        m.deposit(1, ins("BPT", 0)).unwrap();
        m.start();
        let r = m.run(RunLimits::instructions(10)).unwrap();
        assert_eq!(r.reason, StopReason::BreakInstruction);
        assert_eq!(m.state().status, Status::Paused);
        assert_eq!(m.state().pc(), 2);
    }

    #[test]
    fn snapshot_text_round_trip() {
        let mut m = machine();
        m.deposit(0o777, Word::new(0o123456)).unwrap();
        m.set_breakpoint(0o12).unwrap();
        m.start();
        m.step_instruction().unwrap();
        let text = m.state().to_text();
        assert_eq!(text.lines().count(), 11 + 32);
        assert_eq!(MachineState::from_text(&text).unwrap(), *m.state());
        let broken = text.replace("OVF 0", "OVF 2");
        assert!(matches!(
            MachineState::from_text(&broken),
            Err(MachineError::Snapshot { line: 7, .. })
        ));
    }

    #[test]
    fn boot_rules() {
        let mut m = machine();
        let empty = TapeImage::empty(crate::devices::Provenance::Imported);
        assert!(matches!(m.boot_load(&empty), Err(MachineError::EmptyTape)));
        let big = crate::devices::encode_tape(&vec![Word::new(1); MEMORY_WORDS + 1]);
        assert!(matches!(
            m.boot_load(&big),
            Err(MachineError::OversizedTape(1025))
        ));
        let ragged = TapeImage::new(vec![0, 1, 2], crate::devices::Provenance::Imported).unwrap();
        assert!(matches!(m.boot_load(&ragged), Err(MachineError::Tape(_))));
        m.start();
        let ok = crate::devices::encode_tape(&[Word::new(1)]);
        assert!(matches!(m.boot_load(&ok), Err(MachineError::NotHalted)));
    }

    #[test]
    fn control_queue_applies_between_microwords() {
        let mut m = machine();
        m.deposit(0, ins("JMP", 0)).unwrap();
        let h = m.control_handle();
        h.send(Control::SetBreakpoint(0));
        m.start();
        // resume flag lets the first fetch at 0 proceed; the second pauses.
        let r = m.run(RunLimits::instructions(10)).unwrap();
        assert_eq!(r.reason, StopReason::Breakpoint(0));
        assert_eq!(r.instructions, 1);
        h.send(Control::Stop);
        m.start();
        let r = m.run(RunLimits::instructions(10)).unwrap();
        assert_eq!(r.reason, StopReason::StopRequested);
    }
}
