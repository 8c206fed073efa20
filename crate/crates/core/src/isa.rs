//! Word format and the reconstructed 32-instruction set.
//!
//! An 18-bit word holds one instruction laid out as
//!
//! ```text
//!  17      13 12   10 9                 0
//! +----------+-------+-------------------+
//! |  opcode  |  mod  |      address      |
//! +----------+-------+-------------------+
//! ```
//!
//! The modifier selects the device channel for I/O instructions. Because the
//! address field is the low ten bits, address substitution can overwrite it
//! without disturbing opcode or modifier.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const WORD_BITS: u32 = 18;
pub const WORD_MASK: u32 = (1 << WORD_BITS) - 1;
pub const SIGN_BIT: u32 = 1 << (WORD_BITS - 1);
pub const ADDRESS_BITS: u32 = 10;
pub const ADDRESS_MASK: u32 = (1 << ADDRESS_BITS) - 1;
pub const MODIFIER_MASK: u32 = 0b111;
pub const OPCODE_COUNT: usize = 32;
pub const MEMORY_WORDS: usize = 1 << ADDRESS_BITS;

/// The shipped reconstruction, one line per opcode.
pub const DEFAULT_ISA_TABLE: &str = include_str!("../data/isa.tbl");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsaError {
    #[error("opcode {0} out of range 0..32")]
    Opcode(u32),
    #[error("modifier {0} out of range 0..8")]
    Modifier(u32),
    #[error("address {0:o} out of range 0..2000 (octal)")]
    Address(u32),
    #[error("`{0}` is not an octal word")]
    BadWord(String),
    #[error("isa table line {line}: {message}")]
    Table { line: usize, message: String },
    #[error("isa table invalid: {0}")]
    Invariant(String),
}

/// An 18-bit machine word. Construction reduces modulo 2^18.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Word(u32);

impl Word {
    pub const ZERO: Word = Word(0);

    pub const fn new(value: u32) -> Word {
        Word(value & WORD_MASK)
    }

    /// Two's-complement encoding of a signed value, modulo 2^18.
    pub fn from_signed(value: i64) -> Word {
        Word((value.rem_euclid(1 << WORD_BITS)) as u32)
    }

    pub const fn value(self) -> u32 {
        self.0
    }

    /// Two's-complement interpretation in `-2^17 .. 2^17`.
    pub fn to_signed(self) -> i32 {
        if self.0 & SIGN_BIT != 0 {
            self.0 as i32 - (1 << WORD_BITS)
        } else {
            self.0 as i32
        }
    }

    pub fn is_negative(self) -> bool {
        self.0 & SIGN_BIT != 0
    }

    pub fn bit(self, index: u32) -> bool {
        (self.0 >> index) & 1 == 1
    }

    pub fn address_field(self) -> u16 {
        (self.0 & ADDRESS_MASK) as u16
    }

    /// Same word with the low ten bits replaced.
    pub fn with_address_field(self, address: u16) -> Word {
        Word((self.0 & !ADDRESS_MASK) | (address as u32 & ADDRESS_MASK))
    }

    pub fn parse_octal(s: &str) -> Result<Word, IsaError> {
        let v = u32::from_str_radix(s, 8).map_err(|_| IsaError::BadWord(s.to_string()))?;
        if v > WORD_MASK {
            return Err(IsaError::BadWord(s.to_string()));
        }
        Ok(Word(v))
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:06o}", self.0)
    }
}

impl FromStr for Word {
    type Err = IsaError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Word::parse_octal(s)
    }
}

/// Four-digit octal rendering used for addresses everywhere.
pub fn format_address(addr: u16) -> String {
    format!("{addr:04o}")
}

pub fn parse_address(s: &str) -> Result<u16, IsaError> {
    let v = u32::from_str_radix(s, 8).map_err(|_| IsaError::BadWord(s.to_string()))?;
    if v as usize >= MEMORY_WORDS {
        return Err(IsaError::Address(v));
    }
    Ok(v as u16)
}

/// A decoded instruction word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub opcode: u8,
    pub modifier: u8,
    pub address: u16,
}

impl Instruction {
    pub fn new(opcode: u32, modifier: u32, address: u32) -> Result<Instruction, IsaError> {
        if opcode as usize >= OPCODE_COUNT {
            return Err(IsaError::Opcode(opcode));
        }
        if modifier > MODIFIER_MASK {
            return Err(IsaError::Modifier(modifier));
        }
        if address > ADDRESS_MASK {
            return Err(IsaError::Address(address));
        }
        Ok(Instruction {
            opcode: opcode as u8,
            modifier: modifier as u8,
            address: address as u16,
        })
    }
}

/// Packs the fields; fails if any field is out of range.
pub fn encode(instr: Instruction) -> Result<Word, IsaError> {
    let checked = Instruction::new(
        instr.opcode as u32,
        instr.modifier as u32,
        instr.address as u32,
    )?;
    Ok(Word(
        (checked.opcode as u32) << 13 | (checked.modifier as u32) << 10 | checked.address as u32,
    ))
}

/// Total on 18-bit words: every word is some instruction.
pub fn decode(w: Word) -> Instruction {
    Instruction {
        opcode: (w.0 >> 13) as u8,
        modifier: ((w.0 >> 10) & MODIFIER_MASK) as u8,
        address: (w.0 & ADDRESS_MASK) as u16,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OperandClass {
    /// The address field names a memory cell or jump target.
    Memory,
    /// The modifier field names an I/O channel.
    Device,
    None,
}

impl OperandClass {
    pub fn name(self) -> &'static str {
        match self {
            OperandClass::Memory => "memory",
            OperandClass::Device => "device",
            OperandClass::None => "none",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "memory" => Some(OperandClass::Memory),
            "device" => Some(OperandClass::Device),
            "none" => Some(OperandClass::None),
            _ => None,
        }
    }
}

/// Execute-microword duration: 8 us when the execute row touches core, 4 us otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DurationClass {
    Short,
    Long,
}

impl DurationClass {
    pub fn micros(self) -> u64 {
        match self {
            DurationClass::Short => 4,
            DurationClass::Long => 8,
        }
    }

    pub fn from_micros(us: u64) -> Option<Self> {
        match us {
            4 => Some(DurationClass::Short),
            8 => Some(DurationClass::Long),
            _ => None,
        }
    }
}

macro_rules! semantics {
    ($($variant:ident => $tag:literal),* $(,)?) => {
        /// What an opcode is meant to do. Execution itself is driven by the
        /// microcode rows; the tag documents intent and lets table checks
        /// reject forbidden entries.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum Semantic { $($variant),* }

        impl Semantic {
            pub fn tag(self) -> &'static str {
                match self { $(Semantic::$variant => $tag),* }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s { $($tag => Some(Semantic::$variant),)* _ => None }
            }
        }
    };
}

semantics! {
    Halt => "halt",
    Add => "add",
    Sub => "sub",
    Load => "load",
    Store => "store",
    And => "and",
    Ior => "ior",
    Xor => "xor",
    Clear => "clear",
    Complement => "complement",
    ShiftLeft => "shl",
    ShiftRight => "shr",
    LogicalShiftLeft => "lsl",
    LogicalShiftRight => "lsr",
    Jump => "jump",
    JumpZero => "jump-zero",
    JumpNegative => "jump-negative",
    JumpOverflow => "jump-overflow",
    AddressSubstitute => "address-substitute",
    Read => "read",
    Write => "write",
    Punch => "punch",
    Nop => "nop",
    Breakpoint => "breakpoint",
    Spare => "spare",
    // Never valid in a table; present so alternative tables can be rejected.
    JumpToSubroutine => "jump-to-subroutine",
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsaEntry {
    pub opcode: u8,
    pub mnemonic: String,
    pub operand: OperandClass,
    pub duration: DurationClass,
    pub semantic: Semantic,
}

/// The 32-entry opcode table shared by the assembler, disassembler and machine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsaTable {
    entries: Vec<IsaEntry>,
}

impl IsaTable {
    /// Builds a table from entries in any order, checking every invariant.
    pub fn new(mut entries: Vec<IsaEntry>) -> Result<IsaTable, IsaError> {
        entries.sort_by_key(|e| e.opcode);
        if entries.len() != OPCODE_COUNT {
            return Err(IsaError::Invariant(format!(
                "expected {OPCODE_COUNT} entries, found {}",
                entries.len()
            )));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.opcode as usize != i {
                return Err(IsaError::Invariant(format!(
                    "opcode {:02o} missing or duplicated",
                    i
                )));
            }
        }
        let mut names = HashSet::new();
        for e in &entries {
            if !names.insert(e.mnemonic.as_str()) {
                return Err(IsaError::Invariant(format!(
                    "mnemonic {} is not unique",
                    e.mnemonic
                )));
            }
            if e.semantic == Semantic::JumpToSubroutine {
                return Err(IsaError::Invariant(format!(
                    "{} is tagged jump-to-subroutine; the machine has no such instruction",
                    e.mnemonic
                )));
            }
        }
        let halts = entries
            .iter()
            .filter(|e| e.semantic == Semantic::Halt)
            .count();
        if halts != 1 {
            return Err(IsaError::Invariant(format!(
                "expected exactly one halt, found {halts}"
            )));
        }
        Ok(IsaTable { entries })
    }

    pub fn default_table() -> IsaTable {
        IsaTable::parse(DEFAULT_ISA_TABLE).expect("shipped isa table is valid")
    }

    /// Reads the text table: `opcode mnemonic operand duration [semantic]`,
    /// opcode in octal, `#` comments. A missing semantic column defaults to `spare`.
    pub fn parse(text: &str) -> Result<IsaTable, IsaError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |message: String| IsaError::Table { line, message };
            let cols: Vec<&str> = body.split_whitespace().collect();
            if !(4..=5).contains(&cols.len()) {
                return Err(err(format!(
                    "expected 4 or 5 columns, found {}",
                    cols.len()
                )));
            }
            let opcode = u8::from_str_radix(cols[0], 8)
                .ok()
                .filter(|&o| (o as usize) < OPCODE_COUNT)
                .ok_or_else(|| err(format!("bad opcode `{}`", cols[0])))?;
            if !seen.insert(opcode) {
                return Err(err(format!("opcode {opcode:02o} listed twice")));
            }
            let mnemonic = cols[1].to_ascii_uppercase();
            if !mnemonic.chars().all(|c| c.is_ascii_alphanumeric()) {
                return Err(err(format!("bad mnemonic `{}`", cols[1])));
            }
            let operand = OperandClass::parse(cols[2])
                .ok_or_else(|| err(format!("bad operand class `{}`", cols[2])))?;
            let duration = cols[3]
                .parse::<u64>()
                .ok()
                .and_then(DurationClass::from_micros)
                .ok_or_else(|| err(format!("duration must be 4 or 8, got `{}`", cols[3])))?;
            let semantic = match cols.get(4) {
                Some(tag) => {
                    Semantic::parse(tag).ok_or_else(|| err(format!("unknown semantic `{tag}`")))?
                }
                None => Semantic::Spare,
            };
            entries.push(IsaEntry {
                opcode,
                mnemonic,
                operand,
                duration,
                semantic,
            });
        }
        IsaTable::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{:02o}  {}  {}  {}  {}\n",
                e.opcode,
                e.mnemonic,
                e.operand.name(),
                e.duration.micros(),
                e.semantic.tag()
            ));
        }
        s
    }

    pub fn entries(&self) -> &[IsaEntry] {
        &self.entries
    }

    pub fn entry(&self, opcode: u8) -> &IsaEntry {
        &self.entries[opcode as usize]
    }

    pub fn by_mnemonic(&self, mnemonic: &str) -> Option<&IsaEntry> {
        self.entries
            .iter()
            .find(|e| e.mnemonic.eq_ignore_ascii_case(mnemonic))
    }

    pub fn by_semantic(&self, semantic: Semantic) -> Option<&IsaEntry> {
        self.entries.iter().find(|e| e.semantic == semantic)
    }
}

impl Default for IsaTable {
    fn default() -> Self {
        IsaTable::default_table()
    }
}

/// One-line rendering that re-assembles to the same word.
///
/// Words whose unused fields are non-zero (an operand on a `none`-class
/// opcode, a modifier on a memory instruction, an address on an I/O
/// instruction) cannot be written as an instruction, so they come out as
/// `DATA` with the full octal value.
pub fn disassemble(w: Word, table: &IsaTable) -> String {
    let ins = decode(w);
    let e = table.entry(ins.opcode);
    match e.operand {
        OperandClass::None if ins.modifier == 0 && ins.address == 0 => e.mnemonic.clone(),
        OperandClass::Memory if ins.modifier == 0 => {
            format!("{} {}", e.mnemonic, format_address(ins.address))
        }
        OperandClass::Device if ins.address == 0 => format!("{} {}", e.mnemonic, ins.modifier),
        _ => format!("DATA {w}"),
    }
}
