//! Microprogrammed control.
//!
//! The control store is a diode matrix: one row shared by every instruction
//! for fetch, and one execute row per opcode. A row asserts a set of
//! [`ControlLine`]s and lasts 4 us, or 8 us when it cycles core memory.
//! Every instruction is exactly one fetch row followed by one execute row.
//!
//! Within a row the machine applies the asserted lines in this order:
//!
//! 1. `MAR_FROM_PC` / `MAR_FROM_ADDR` load the memory address register.
//! 2. `IO_STROBE` moves one frame between the accumulator's low five bits and
//!    the channel named by the instruction modifier; with `ACC_LOAD` it is an
//!    input, otherwise an output.
//! 3. `MEM_READ` fills MDR from core. `ACC_TO_MDR` then `MEM_WRITE` store it;
//!    with `ADDR_FIELD_WRITE` the write inhibits bits 17..10 so only the
//!    address field takes the accumulator's low ten bits.
//! 4. `IR_LOAD`, `PC_INCREMENT`.
//! 5. The accumulator bus: one `ALU_*` result, or MDR (`MDR_TO_ACC`), or the
//!    input frame; latched by `ACC_LOAD`. `ACC_CLEAR` and `ACC_COMPLEMENT`
//!    act after the latch. On an ALU row `COND_OVF` records signed overflow
//!    in the sticky flag, and `COND_NEG` on `ALU_SHR` selects sign fill.
//! 6. `PC_FROM_ADDR` jumps when every asserted `COND_*` holds; testing
//!    `COND_OVF` clears the flag.
//! 7. `HALT` stops the machine, `BREAK` pauses it.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::isa::{IsaTable, OPCODE_COUNT};

pub const DEFAULT_ROM: &str = include_str!("../data/microcode.rom");

const ROM_HEADER: &str = "\
# Diode matrix: one shared fetch row and one execute row per opcode.
# Each token is a diode; deleting a token removes the diode.
# dur=8 for rows that cycle core memory, dur=4 for register-only rows.
";

macro_rules! control_lines {
    ($($variant:ident => $name:literal),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        #[repr(u8)]
        pub enum ControlLine { $($variant),* }

        impl ControlLine {
            pub const ALL: &'static [ControlLine] = &[$(ControlLine::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(ControlLine::$variant => $name),* }
            }

            pub fn parse(s: &str) -> Option<ControlLine> {
                match s { $($name => Some(ControlLine::$variant),)* _ => None }
            }
        }
    };
}

control_lines! {
    MemRead => "MEM_READ",
    MemWrite => "MEM_WRITE",
    AluAdd => "ALU_ADD",
    AluSub => "ALU_SUB",
    AluAnd => "ALU_AND",
    AluIor => "ALU_IOR",
    AluXor => "ALU_XOR",
    AluShl => "ALU_SHL",
    AluShr => "ALU_SHR",
    AccLoad => "ACC_LOAD",
    AccClear => "ACC_CLEAR",
    AccComplement => "ACC_COMPLEMENT",
    MarFromPc => "MAR_FROM_PC",
    MarFromAddr => "MAR_FROM_ADDR",
    MdrToAcc => "MDR_TO_ACC",
    AccToMdr => "ACC_TO_MDR",
    IrLoad => "IR_LOAD",
    PcIncrement => "PC_INCREMENT",
    PcFromAddr => "PC_FROM_ADDR",
    CondZero => "COND_ZERO",
    CondNeg => "COND_NEG",
    CondOvf => "COND_OVF",
    AddrFieldWrite => "ADDR_FIELD_WRITE",
    IoStrobe => "IO_STROBE",
    Halt => "HALT",
    Break => "BREAK",
}

impl fmt::Display for ControlLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const ALU_LINES: [ControlLine; 7] = [
    ControlLine::AluAdd,
    ControlLine::AluSub,
    ControlLine::AluAnd,
    ControlLine::AluIor,
    ControlLine::AluXor,
    ControlLine::AluShl,
    ControlLine::AluShr,
];

const COND_LINES: [ControlLine; 3] = [
    ControlLine::CondZero,
    ControlLine::CondNeg,
    ControlLine::CondOvf,
];

/// One row of the matrix as a bit set over [`ControlLine`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ControlSet(u32);

impl ControlSet {
    pub const EMPTY: ControlSet = ControlSet(0);

    pub fn from_lines(lines: &[ControlLine]) -> ControlSet {
        ControlSet(lines.iter().fold(0, |acc, &l| acc | 1 << l as u8))
    }

    #[inline]
    pub fn has(self, line: ControlLine) -> bool {
        self.0 & (1 << line as u8) != 0
    }

    pub fn insert(&mut self, line: ControlLine) {
        self.0 |= 1 << line as u8;
    }

    pub fn remove(&mut self, line: ControlLine) {
        self.0 &= !(1 << line as u8);
    }

    pub fn lines(self) -> impl Iterator<Item = ControlLine> {
        ControlLine::ALL
            .iter()
            .copied()
            .filter(move |&l| self.has(l))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn touches_memory(self) -> bool {
        self.has(ControlLine::MemRead) || self.has(ControlLine::MemWrite)
    }

    /// The single ALU line asserted, if any (the first one if several).
    pub fn alu_op(self) -> Option<ControlLine> {
        ALU_LINES.iter().copied().find(|&l| self.has(l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MicroWord {
    pub lines: ControlSet,
    pub duration_us: u64,
}

impl MicroWord {
    pub fn new(lines: &[ControlLine], duration_us: u64) -> MicroWord {
        MicroWord {
            lines: ControlSet::from_lines(lines),
            duration_us,
        }
    }
}

/// Which row of the matrix a diagnostic or trace entry refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RowId {
    Fetch,
    Execute(u8),
}

impl fmt::Display for RowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowId::Fetch => f.write_str("FETCH"),
            RowId::Execute(op) => write!(f, "{op:02o}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub row: Option<RowId>,
    /// Source line, when the diagnostic came from parsing text.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{sev}")?;
        if let Some(line) = self.line {
            write!(f, " (line {line})")?;
        }
        if let Some(row) = self.row {
            write!(f, " [row {row}]")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("microcode rejected:\n{}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"))]
pub struct RomError(pub Vec<Diagnostic>);

/// The control store: fetch row plus 32 execute rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroRom {
    pub fetch: MicroWord,
    pub execute: [MicroWord; OPCODE_COUNT],
}

impl MicroRom {
    pub fn default_rom() -> MicroRom {
        load_rom(DEFAULT_ROM).expect("shipped microcode is valid")
    }

    pub fn row(&self, row: RowId) -> &MicroWord {
        match row {
            RowId::Fetch => &self.fetch,
            RowId::Execute(op) => &self.execute[op as usize],
        }
    }

    /// Canonical text form; the shipped ROM file is exactly this output.
    pub fn to_text(&self) -> String {
        let mut s = String::from(ROM_HEADER);
        let mut row = |id: RowId, w: &MicroWord| {
            s.push_str(&format!("{id} dur={}", w.duration_us));
            for l in w.lines.lines() {
                s.push(' ');
                s.push_str(l.name());
            }
            s.push('\n');
        };
        row(RowId::Fetch, &self.fetch);
        for (op, w) in self.execute.iter().enumerate() {
            row(RowId::Execute(op as u8), w);
        }
        s
    }
}

impl Default for MicroRom {
    fn default() -> Self {
        MicroRom::default_rom()
    }
}

fn error(row: Option<RowId>, line: Option<usize>, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        severity: Severity::Error,
        row,
        line,
        message: message.into(),
    }
}

fn warning(row: RowId, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        severity: Severity::Warning,
        row: Some(row),
        line: None,
        message: message.into(),
    }
}

/// Parses the ROM text: `FETCH|<octal opcode> dur=<4|8> LINE...`, `#` comments.
/// Any parse problem or error-severity invariant violation rejects the ROM.
pub fn load_rom(text: &str) -> Result<MicroRom, RomError> {
    let mut diags = Vec::new();
    let mut fetch: Option<MicroWord> = None;
    let mut execute: [Option<MicroWord>; OPCODE_COUNT] = [None; OPCODE_COUNT];
    let mut lines_of: Vec<(RowId, usize)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut tokens = body.split_whitespace();
        let head = tokens.next().unwrap();
        let row = if head == "FETCH" {
            RowId::Fetch
        } else {
            match u8::from_str_radix(head, 8) {
                Ok(op) if (op as usize) < OPCODE_COUNT => RowId::Execute(op),
                _ => {
                    diags.push(error(None, Some(line), format!("bad row label `{head}`")));
                    continue;
                }
            }
        };
        let duration = match tokens.next().and_then(|t| t.strip_prefix("dur=")) {
            Some(d) => match d.parse::<u64>() {
                Ok(us @ (4 | 8)) => us,
                _ => {
                    diags.push(error(
                        Some(row),
                        Some(line),
                        format!("duration must be 4 or 8, got `{d}`"),
                    ));
                    continue;
                }
            },
            None => {
                diags.push(error(Some(row), Some(line), "missing `dur=` field"));
                continue;
            }
        };
        let mut set = ControlSet::EMPTY;
        let mut ok = true;
        for tok in tokens {
            match ControlLine::parse(tok) {
                Some(l) if set.has(l) => {
                    diags.push(error(
                        Some(row),
                        Some(line),
                        format!("{tok} asserted twice"),
                    ));
                    ok = false;
                }
                Some(l) => set.insert(l),
                None => {
                    diags.push(error(
                        Some(row),
                        Some(line),
                        format!("unknown control line `{tok}`"),
                    ));
                    ok = false;
                }
            }
        }
        if !ok {
            continue;
        }
        let word = MicroWord {
            lines: set,
            duration_us: duration,
        };
        let slot = match row {
            RowId::Fetch => &mut fetch,
            RowId::Execute(op) => &mut execute[op as usize],
        };
        if slot.is_some() {
            diags.push(error(Some(row), Some(line), format!("duplicate row {row}")));
            continue;
        }
        *slot = Some(word);
        lines_of.push((row, line));
    }

    if fetch.is_none() {
        diags.push(error(Some(RowId::Fetch), None, "missing fetch row"));
    }
    for (op, slot) in execute.iter().enumerate() {
        if slot.is_none() {
            diags.push(error(
                Some(RowId::Execute(op as u8)),
                None,
                format!("missing execute row for opcode {op:02o}"),
            ));
        }
    }
    if !diags.is_empty() {
        return Err(RomError(diags));
    }

    let rom = MicroRom {
        fetch: fetch.unwrap(),
        execute: execute.map(Option::unwrap),
    };
    let mut problems: Vec<Diagnostic> = validate_rom(&rom)
        .into_iter()
        .filter(|d| d.severity == Severity::Error)
        .collect();
    if problems.is_empty() {
        return Ok(rom);
    }
    for d in &mut problems {
        d.line = d
            .row
            .and_then(|r| lines_of.iter().find(|(id, _)| *id == r).map(|&(_, l)| l));
    }
    Err(RomError(problems))
}

fn check_word(row: RowId, w: &MicroWord, out: &mut Vec<Diagnostic>) {
    use ControlLine::*;
    let l = w.lines;
    if l.has(MemRead) && l.has(MemWrite) {
        out.push(error(
            Some(row),
            None,
            "MEM_READ and MEM_WRITE both asserted",
        ));
    }
    if w.duration_us != 4 && w.duration_us != 8 {
        out.push(error(
            Some(row),
            None,
            format!("duration {} is neither 4 nor 8", w.duration_us),
        ));
    } else if (w.duration_us == 8) != l.touches_memory() {
        out.push(error(
            Some(row),
            None,
            format!(
                "duration {} inconsistent: rows cycling core take 8 us, others 4 us",
                w.duration_us
            ),
        ));
    }
    let alus = ALU_LINES.iter().filter(|&&a| l.has(a)).count();
    if alus > 1 {
        out.push(error(
            Some(row),
            None,
            format!("{alus} ALU lines asserted; at most one allowed"),
        ));
    }
    if l.has(MarFromPc) && l.has(MarFromAddr) {
        out.push(error(
            Some(row),
            None,
            "MAR driven from both PC and address field",
        ));
    }
    if l.has(AddrFieldWrite) && !l.has(MemWrite) {
        out.push(error(Some(row), None, "ADDR_FIELD_WRITE without MEM_WRITE"));
    }
    if l.has(Halt) && l.has(PcFromAddr) {
        out.push(warning(row, "halt also jumps"));
    }
    if COND_LINES.iter().filter(|&&c| l.has(c)).count() > 1 {
        out.push(warning(row, "several COND lines asserted; all must hold"));
    }
    if l.has(AccLoad) && alus == 0 && !l.has(MdrToAcc) && !l.has(IoStrobe) {
        out.push(warning(
            row,
            "ACC_LOAD with no source on the accumulator bus",
        ));
    }
    if l.touches_memory() && !l.has(MarFromPc) && !l.has(MarFromAddr) {
        out.push(warning(row, "memory cycle uses a stale MAR"));
    }
    if l.has(MemWrite) && !l.has(AccToMdr) && !l.has(AddrFieldWrite) {
        out.push(warning(row, "MEM_WRITE stores a stale MDR"));
    }
}

/// Structural lint of a ROM. Empty iff every invariant holds and no
/// suspicious pattern is present.
pub fn validate_rom(rom: &MicroRom) -> Vec<Diagnostic> {
    use ControlLine::*;
    let mut out = Vec::new();
    for required in [MemRead, IrLoad, MarFromPc, PcIncrement] {
        if !rom.fetch.lines.has(required) {
            out.push(error(
                Some(RowId::Fetch),
                None,
                format!("fetch row lacks {required}"),
            ));
        }
    }
    if rom.fetch.duration_us != 8 {
        out.push(error(Some(RowId::Fetch), None, "fetch row must last 8 us"));
    }
    for bad in [Halt, Break, PcFromAddr, IoStrobe] {
        if rom.fetch.lines.has(bad) {
            out.push(error(
                Some(RowId::Fetch),
                None,
                format!("fetch row asserts {bad}"),
            ));
        }
    }
    check_word(RowId::Fetch, &rom.fetch, &mut out);
    for (op, w) in rom.execute.iter().enumerate() {
        let row = RowId::Execute(op as u8);
        check_word(row, w, &mut out);
        if w.lines.has(IrLoad) {
            out.push(warning(row, "execute row reloads IR"));
        }
    }
    out
}

/// Cross-checks the duration class recorded in an ISA table against the ROM.
pub fn check_against_isa(rom: &MicroRom, isa: &IsaTable) -> Vec<Diagnostic> {
    isa.entries()
        .iter()
        .filter(|e| e.duration.micros() != rom.execute[e.opcode as usize].duration_us)
        .map(|e| {
            error(
                Some(RowId::Execute(e.opcode)),
                None,
                format!(
                    "{} is {} us in the ISA table but {} us in the ROM",
                    e.mnemonic,
                    e.duration.micros(),
                    rom.execute[e.opcode as usize].duration_us
                ),
            )
        })
        .collect()
}

/// Fetch plus execute duration for one instruction.
pub fn microstep_cost(rom: &MicroRom, opcode: u8) -> u64 {
    rom.fetch.duration_us + rom.execute[opcode as usize].duration_us
}

/// Distinct per-instruction costs across all opcodes.
pub fn cost_envelope(rom: &MicroRom) -> BTreeSet<u64> {
    (0..OPCODE_COUNT as u8)
        .map(|op| microstep_cost(rom, op))
        .collect()
}
