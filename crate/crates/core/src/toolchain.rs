//! Assembler, disassembler and the arithmetic subroutine library.
//!
//! The machine was programmed directly in octal; this two-pass assembler is a
//! modern convenience and its `.mra` syntax is invented.
//!
//! ```text
//! [LABEL:] [MNEMONIC | ORG | DATA | EQU | END] [operand] [; comment]
//! ```
//!
//! Numbers are octal. An operand is a sum of terms (`LOOP+2`, `TEXT-1`,
//! `-5`), each term a number or label. Memory instructions take an address,
//! I/O instructions a channel number. `NAME: EQU expr` binds a name to a
//! value instead of a location; `END` may name the entry point.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::devices::{encode_tape, TapeImage};
use crate::isa::{
    disassemble, encode, format_address, Instruction, IsaTable, OperandClass, Word, ADDRESS_MASK,
    MEMORY_WORDS, MODIFIER_MASK, SIGN_BIT, WORD_MASK,
};
use crate::machine::{Machine, MachineError, RunLimits, StopReason};

pub const MULTIPLY_SOURCE: &str = include_str!("../asm/multiply.mra");
pub const DIVIDE_SOURCE: &str = include_str!("../asm/divide.mra");
pub const LINKAGE_SOURCE: &str = include_str!("../asm/linkage.mra");
pub const HELLO_SOURCE: &str = include_str!("../asm/hello.mra");

/// Operand and result cells shared by the library routines.
pub const ARG1: u16 = 0o10;
pub const ARG2: u16 = 0o11;
pub const RES1: u16 = 0o12;
pub const RES2: u16 = 0o13;
pub const FLAG: u16 = 0o14;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("{what} {value:o} out of range")]
    OutOfRange { what: &'static str, value: i64 },
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("address {} assembled twice", format_address(*.0))]
    Overlap(u16),
    #[error("{0} needs an operand")]
    MissingOperand(String),
    #[error("{0} takes no operand")]
    UnexpectedOperand(String),
    #[error("syntax: {0}")]
    Syntax(String),
    #[error("missing END")]
    MissingEnd,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListingLine {
    pub line: usize,
    pub address: Option<u16>,
    pub word: Option<Word>,
    pub source: String,
}

impl fmt::Display for ListingLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.address, self.word) {
            (Some(a), Some(w)) => write!(f, "{}  {}  {}", format_address(a), w, self.source),
            _ if self.source.is_empty() => Ok(()),
            _ => write!(f, "{:14}{}", "", self.source),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssemblyOutput {
    /// Lowest assembled address; the tape starts here.
    pub origin: u16,
    /// Contiguous image from `origin`, gaps filled with zero.
    pub words: Vec<Word>,
    pub tape: TapeImage,
    pub listing: Vec<ListingLine>,
    pub symbols: BTreeMap<String, i64>,
    pub entry: u16,
}

impl AssemblyOutput {
    pub fn listing_text(&self) -> String {
        self.listing.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn symbol(&self, name: &str) -> Option<u16> {
        self.symbols.get(name).map(|&v| v as u16)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Directive {
    Org,
    Data,
    Equ,
    End,
}

#[derive(Debug, Clone)]
enum Op {
    Directive(Directive),
    Instr(u8, OperandClass, String),
}

#[derive(Debug, Clone)]
struct Statement<'a> {
    line: usize,
    source: &'a str,
    label: Option<&'a str>,
    op: Option<Op>,
    operand: Option<&'a str>,
}

fn err(line: usize, kind: AsmErrorKind) -> AsmError {
    AsmError { line, kind }
}

fn is_ident(s: &str) -> bool {
    let mut c = s.chars();
    matches!(c.next(), Some(ch) if ch.is_ascii_alphabetic() || ch == '_')
        && c.all(|ch| ch.is_ascii_alphanumeric() || ch == '_')
}

fn parse_line<'a>(line: usize, source: &'a str, isa: &IsaTable) -> Result<Statement<'a>, AsmError> {
    let code = source.split(';').next().unwrap_or("").trim();
    let (label, rest) = match code.split_once(':') {
        Some((l, r)) => {
            let l = l.trim();
            if !is_ident(l) {
                return Err(err(line, AsmErrorKind::Syntax(format!("bad label `{l}`"))));
            }
            (Some(l), r.trim())
        }
        None => (None, code),
    };
    let mut parts = rest.splitn(2, char::is_whitespace);
    let mnemonic = parts.next().filter(|m| !m.is_empty());
    let operand = parts.next().map(str::trim).filter(|o| !o.is_empty());
    let op = match mnemonic {
        None => None,
        Some(m) => {
            let upper = m.to_ascii_uppercase();
            Some(match upper.as_str() {
                "ORG" => Op::Directive(Directive::Org),
                "DATA" => Op::Directive(Directive::Data),
                "EQU" => Op::Directive(Directive::Equ),
                "END" => Op::Directive(Directive::End),
                _ => {
                    let e = isa
                        .by_mnemonic(&upper)
                        .ok_or_else(|| err(line, AsmErrorKind::UnknownMnemonic(m.to_string())))?;
                    Op::Instr(e.opcode, e.operand, e.mnemonic.clone())
                }
            })
        }
    };
    if matches!(op, Some(Op::Directive(Directive::Equ))) && label.is_none() {
        return Err(err(line, AsmErrorKind::Syntax("EQU needs a label".into())));
    }
    Ok(Statement {
        line,
        source,
        label,
        op,
        operand,
    })
}

/// Evaluates `[-]term {(+|-) term}`. `None` from the lookup means undefined.
fn eval(line: usize, expr: &str, lookup: &dyn Fn(&str) -> Option<i64>) -> Result<i64, AsmError> {
    let syntax = |m: String| err(line, AsmErrorKind::Syntax(m));
    let mut total = 0i64;
    let mut sign = 1i64;
    let mut expect_term = true;
    let mut rest = expr.trim();
    if let Some(r) = rest.strip_prefix('-') {
        sign = -1;
        rest = r.trim_start();
    }
    while !rest.is_empty() {
        if expect_term {
            let end = rest
                .find(|c: char| c == '+' || c == '-' || c.is_whitespace())
                .unwrap_or(rest.len());
            let term = &rest[..end];
            let value = if term.starts_with(|c: char| c.is_ascii_digit()) {
                i64::from_str_radix(term, 8)
                    .map_err(|_| syntax(format!("bad octal number `{term}`")))?
            } else if is_ident(term) {
                lookup(term)
                    .ok_or_else(|| err(line, AsmErrorKind::UndefinedLabel(term.to_string())))?
            } else {
                return Err(syntax(format!("bad operand `{expr}`")));
            };
            total += sign * value;
            rest = rest[end..].trim_start();
            expect_term = false;
        } else {
            sign = match rest.as_bytes()[0] {
                b'+' => 1,
                b'-' => -1,
                _ => return Err(syntax(format!("bad operand `{expr}`"))),
            };
            rest = rest[1..].trim_start();
            expect_term = true;
        }
    }
    if expect_term {
        return Err(syntax(format!("incomplete operand `{expr}`")));
    }
    Ok(total)
}

fn in_range(
    line: usize,
    what: &'static str,
    value: i64,
    range: std::ops::RangeInclusive<i64>,
) -> Result<i64, AsmError> {
    if range.contains(&value) {
        Ok(value)
    } else {
        Err(err(line, AsmErrorKind::OutOfRange { what, value }))
    }
}

const DATA_RANGE: std::ops::RangeInclusive<i64> = -(SIGN_BIT as i64)..=WORD_MASK as i64;
const ADDRESS_RANGE: std::ops::RangeInclusive<i64> = 0..=ADDRESS_MASK as i64;

/// Two-pass assembly: pass one places labels, pass two encodes.
pub fn assemble(source: &str, isa: &IsaTable) -> Result<AssemblyOutput, AsmError> {
    let statements = source
        .lines()
        .enumerate()
        .map(|(i, l)| parse_line(i + 1, l.trim_end(), isa))
        .collect::<Result<Vec<_>, _>>()?;

    // Pass one.
    let mut symbols: BTreeMap<String, i64> = BTreeMap::new();
    let mut locations = Vec::with_capacity(statements.len());
    let mut loc: i64 = 0;
    let mut end_line = None;
    for st in &statements {
        if let Some(end) = end_line {
            if st.label.is_some() || st.op.is_some() {
                return Err(err(
                    st.line,
                    AsmErrorKind::Syntax(format!("statement after END on line {end}")),
                ));
            }
        }
        let lookup = |n: &str| symbols.get(n).copied();
        if let Some(Op::Directive(Directive::Org)) = st.op {
            let expr = st
                .operand
                .ok_or_else(|| err(st.line, AsmErrorKind::MissingOperand("ORG".into())))?;
            loc = in_range(
                st.line,
                "origin",
                eval(st.line, expr, &lookup)?,
                ADDRESS_RANGE,
            )?;
        }
        if let Some(label) = st.label {
            let value = match st.op {
                Some(Op::Directive(Directive::Equ)) => {
                    let expr = st
                        .operand
                        .ok_or_else(|| err(st.line, AsmErrorKind::MissingOperand("EQU".into())))?;
                    in_range(st.line, "value", eval(st.line, expr, &lookup)?, DATA_RANGE)?
                }
                _ => loc,
            };
            if symbols.insert(label.to_string(), value).is_some() {
                return Err(err(
                    st.line,
                    AsmErrorKind::DuplicateLabel(label.to_string()),
                ));
            }
        }
        locations.push(loc);
        match st.op {
            Some(Op::Instr(..)) | Some(Op::Directive(Directive::Data)) => loc += 1,
            Some(Op::Directive(Directive::End)) => end_line = Some(st.line),
            _ => {}
        }
    }
    let last_line = statements.len();
    if end_line.is_none() {
        return Err(err(last_line, AsmErrorKind::MissingEnd));
    }

    // Pass two.
    let lookup = |n: &str| symbols.get(n).copied();
    let mut image: BTreeMap<u16, Word> = BTreeMap::new();
    let mut listing = Vec::with_capacity(statements.len());
    let mut entry = None;
    for (st, &loc) in statements.iter().zip(&locations) {
        let word = match &st.op {
            Some(Op::Directive(Directive::Data)) => {
                let expr = st
                    .operand
                    .ok_or_else(|| err(st.line, AsmErrorKind::MissingOperand("DATA".into())))?;
                let v = in_range(st.line, "value", eval(st.line, expr, &lookup)?, DATA_RANGE)?;
                Some(Word::from_signed(v))
            }
            Some(Op::Instr(opcode, class, name)) => {
                let (modifier, address) = match (class, st.operand) {
                    (OperandClass::None, None) => (0, 0),
                    (OperandClass::None, Some(_)) => {
                        return Err(err(st.line, AsmErrorKind::UnexpectedOperand(name.clone())))
                    }
                    (_, None) => {
                        return Err(err(st.line, AsmErrorKind::MissingOperand(name.clone())))
                    }
                    (OperandClass::Memory, Some(e)) => (
                        0,
                        in_range(
                            st.line,
                            "address",
                            eval(st.line, e, &lookup)?,
                            ADDRESS_RANGE,
                        )?,
                    ),
                    (OperandClass::Device, Some(e)) => (
                        in_range(
                            st.line,
                            "channel",
                            eval(st.line, e, &lookup)?,
                            0..=MODIFIER_MASK as i64,
                        )?,
                        0,
                    ),
                };
                let ins = Instruction::new(*opcode as u32, modifier as u32, address as u32)
                    .expect("fields range-checked above");
                Some(encode(ins).expect("valid instruction"))
            }
            Some(Op::Directive(Directive::End)) => {
                if let Some(e) = st.operand {
                    entry =
                        Some(
                            in_range(st.line, "entry", eval(st.line, e, &lookup)?, ADDRESS_RANGE)?
                                as u16,
                        );
                }
                None
            }
            _ => None,
        };
        let address = match word {
            Some(w) => {
                let a = in_range(st.line, "address", loc, 0..=(MEMORY_WORDS as i64 - 1))? as u16;
                if image.insert(a, w).is_some() {
                    return Err(err(st.line, AsmErrorKind::Overlap(a)));
                }
                Some(a)
            }
            None => None,
        };
        listing.push(ListingLine {
            line: st.line,
            address,
            word,
            source: st.source.to_string(),
        });
    }

    let origin = image.keys().next().copied().unwrap_or(0);
    let mut words = Vec::new();
    if let Some(&top) = image.keys().next_back() {
        words = vec![Word::ZERO; (top - origin) as usize + 1];
        for (&a, &w) in &image {
            words[(a - origin) as usize] = w;
        }
    }
    Ok(AssemblyOutput {
        origin,
        tape: encode_tape(&words),
        words,
        listing,
        symbols,
        entry: entry.unwrap_or(origin),
    })
}

/// Listing of `range` that re-assembles to the same words. Labels are not
/// recovered; every operand is numeric.
///
/// Panics if `range` runs past the end of `memory`.
pub fn disassemble_region(memory: &[Word], range: Range<u16>, isa: &IsaTable) -> String {
    assert!(range.end as usize <= memory.len(), "region outside memory");
    let mut out = format!("        ORG {}\n", format_address(range.start));
    for a in range {
        let text = disassemble(memory[a as usize], isa);
        out.push_str(&format!("        {text:<16}; {}\n", format_address(a)));
    }
    out.push_str("        END\n");
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routine {
    Multiply,
    Divide,
}

impl Routine {
    pub fn source(self) -> &'static str {
        match self {
            Routine::Multiply => MULTIPLY_SOURCE,
            Routine::Divide => DIVIDE_SOURCE,
        }
    }

    pub fn assemble(self, isa: &IsaTable) -> AssemblyOutput {
        assemble(self.source(), isa).expect("shipped library assembles")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteResult {
    pub a: i32,
    pub b: i32,
    pub res1: Word,
    pub res2: Word,
    pub flag: Word,
    pub instructions: u64,
    pub elapsed_us: u64,
}

impl SuiteResult {
    /// Compares against host arithmetic, wrapping to 18 bits.
    pub fn matches_host(&self, routine: Routine) -> bool {
        let w = |v: i64| Word::from_signed(v);
        let (a, b) = (self.a as i64, self.b as i64);
        match routine {
            Routine::Multiply => self.res1 == w(a * b),
            Routine::Divide if b == 0 => {
                self.flag == Word::new(1) && self.res1 == Word::ZERO && self.res2 == Word::ZERO
            }
            Routine::Divide => {
                self.flag == Word::ZERO && self.res1 == w(a / b) && self.res2 == w(a % b)
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error("operand {0} does not fit an 18-bit word")]
    Operand(i32),
    #[error("routine did not halt for {a}, {b}: {reason:?}")]
    NoHalt { a: i32, b: i32, reason: StopReason },
}

/// Per-call instruction budget; the longest divide takes a few hundred.
const SUITE_BUDGET: u64 = 10_000;

/// Boot-loads `library` once, then for each pair deposits the operands,
/// runs from the entry stub at 0 to HLT and collects the result cells.
pub fn run_subroutine_suite(
    machine: &mut Machine,
    library: &TapeImage,
    pairs: &[(i32, i32)],
) -> Result<Vec<SuiteResult>, SuiteError> {
    machine.reset();
    machine.boot_load(library)?;
    let range = -(SIGN_BIT as i32)..=(SIGN_BIT as i32 - 1);
    let mut results = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        for v in [a, b] {
            if !range.contains(&v) {
                return Err(SuiteError::Operand(v));
            }
        }
        machine.deposit(ARG1, Word::from_signed(a as i64))?;
        machine.deposit(ARG2, Word::from_signed(b as i64))?;
        machine.set_pc(0)?;
        machine.start();
        let r = machine.run(RunLimits::instructions(SUITE_BUDGET))?;
        if r.reason != StopReason::Halted {
            return Err(SuiteError::NoHalt {
                a,
                b,
                reason: r.reason,
            });
        }
        results.push(SuiteResult {
            a,
            b,
            res1: machine.examine(RES1)?,
            res2: machine.examine(RES2)?,
            flag: machine.examine(FLAG)?,
            instructions: r.instructions,
            elapsed_us: r.elapsed_us,
        });
    }
    Ok(results)
}

/// Memory image for the throughput benchmark: every word is `ADD 0`, so the
/// program counter wraps round core executing nothing but additions.
pub fn add_loop_tape(isa: &IsaTable) -> TapeImage {
    let add = isa.by_mnemonic("ADD").expect("ADD in table").opcode;
    let w = encode(Instruction::new(add as u32, 0, 0).expect("valid")).expect("valid");
    encode_tape(&vec![w; MEMORY_WORDS])
}
