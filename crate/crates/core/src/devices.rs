//! Paper tape media and the I/O channel roster.
//!
//! Tape is 5-track: every frame carries five bits. An 18-bit word is punched
//! as four frames, most significant first. The first frame carries the top
//! three bits of the word in its low bits (its upper two bits must be zero),
//! the other three frames carry five bits each:
//!
//! ```text
//! word  17 16 15 | 14 13 12 11 10 | 9 8 7 6 5 | 4 3 2 1 0
//! frame    0     |       1        |     2     |     3
//! ```
//!
//! A tape file is the magic `MRT1` followed by one byte per frame; only the
//! low five bits of each byte are significant.
//!
//! Device rates are configuration, not history: the defaults are
//! plausibility choices and every time-dependent test pins them.

use std::fmt;

use thiserror::Error;

use crate::isa::{Word, WORD_MASK};

pub const TAPE_MAGIC: &[u8; 4] = b"MRT1";
pub const FRAMES_PER_WORD: usize = 4;
pub const FRAME_MASK: u8 = 0x1f;
pub const CHANNEL_COUNT: usize = 8;

pub const DEFAULT_TELETYPE_CPS: u32 = 10;
pub const DEFAULT_READER_CPS: u32 = 20;
pub const DEFAULT_FAST_READER_CPS: u32 = 200;

/// Channel of the fast reader used for the boot path.
pub const BOOT_CHANNEL: u8 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TapeError {
    #[error("tape has {frames} frames, not a multiple of {FRAMES_PER_WORD}; ragged tail starts at frame {position}")]
    Ragged { frames: usize, position: usize },
    #[error("frame {index} has value {value:#04o}; a leading frame holds only 3 bits")]
    Malformed { index: usize, value: u8 },
    #[error("frame {index} has value {value}, frames are 5 bits")]
    FrameRange { index: usize, value: u8 },
    #[error("tape file does not start with MRT1")]
    BadMagic,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("character {0:?} is not in the teletype repertoire")]
    UnknownChar(char),
    #[error("frame {frame} has no meaning in {shift} shift")]
    UnknownFrame { frame: u8, shift: Shift },
    #[error("frame {0} out of range")]
    FrameRange(u8),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("channel {0} is not assigned to a device")]
    Unassigned(u8),
    #[error("channel {channel} ({kind}) cannot be used for {direction}")]
    WrongDirection {
        channel: u8,
        kind: DeviceKind,
        direction: Direction,
    },
    #[error("channel {0}: no tape mounted")]
    NoTape(u8),
    #[error("channel {0}: end of tape")]
    EndOfTape(u8),
    #[error("frame {0} out of range")]
    FrameRange(u8),
    #[error("device rate must be positive")]
    ZeroRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Assembled,
    Punched,
    Imported,
}

/// An ordered strip of 5-bit frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapeImage {
    frames: Vec<u8>,
    pub provenance: Provenance,
}

impl TapeImage {
    pub fn new(frames: Vec<u8>, provenance: Provenance) -> Result<TapeImage, TapeError> {
        if let Some((index, &value)) = frames.iter().enumerate().find(|(_, &f)| f > FRAME_MASK) {
            return Err(TapeError::FrameRange { index, value });
        }
        Ok(TapeImage { frames, provenance })
    }

    pub fn empty(provenance: Provenance) -> TapeImage {
        TapeImage {
            frames: Vec::new(),
            provenance,
        }
    }

    pub fn frames(&self) -> &[u8] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn push(&mut self, frame: u8) {
        self.frames.push(frame & FRAME_MASK);
    }

    /// Serialises to the `MRT1` file format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.frames.len());
        out.extend_from_slice(TAPE_MAGIC);
        out.extend_from_slice(&self.frames);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TapeImage, TapeError> {
        let body = bytes.strip_prefix(TAPE_MAGIC).ok_or(TapeError::BadMagic)?;
        Ok(TapeImage {
            frames: body.iter().map(|b| b & FRAME_MASK).collect(),
            provenance: Provenance::Imported,
        })
    }
}

pub fn encode_tape(words: &[Word]) -> TapeImage {
    let mut frames = Vec::with_capacity(words.len() * FRAMES_PER_WORD);
    for w in words {
        let v = w.value();
        frames.extend_from_slice(&[
            (v >> 15) as u8,
            ((v >> 10) & 0x1f) as u8,
            ((v >> 5) & 0x1f) as u8,
            (v & 0x1f) as u8,
        ]);
    }
    TapeImage {
        frames,
        provenance: Provenance::Assembled,
    }
}

pub fn decode_tape(image: &TapeImage) -> Result<Vec<Word>, TapeError> {
    let frames = image.frames();
    if !frames.len().is_multiple_of(FRAMES_PER_WORD) {
        return Err(TapeError::Ragged {
            frames: frames.len(),
            position: frames.len() - frames.len() % FRAMES_PER_WORD,
        });
    }
    frames
        .chunks_exact(FRAMES_PER_WORD)
        .enumerate()
        .map(|(i, c)| {
            if c[0] > 0b111 {
                return Err(TapeError::Malformed {
                    index: i * FRAMES_PER_WORD,
                    value: c[0],
                });
            }
            let v = (c[0] as u32) << 15 | (c[1] as u32) << 10 | (c[2] as u32) << 5 | c[3] as u32;
            debug_assert!(v <= WORD_MASK);
            Ok(Word::new(v))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Teletype character code

/// Shift state of the 5-bit teletype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shift {
    Letters,
    Figures,
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shift::Letters => "letters",
            Shift::Figures => "figures",
        })
    }
}

/// Blank tape; ignored on printing.
pub const FRAME_BLANK: u8 = 0;
pub const FRAME_FIGS: u8 = 27;
pub const FRAME_SPACE: u8 = 28;
pub const FRAME_CR: u8 = 29;
pub const FRAME_LF: u8 = 30;
pub const FRAME_LTRS: u8 = 31;

const FIGURES: [char; 12] = ['0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '-', '.'];

/// What a character needs: a frame, and the shift it must be punched in
/// (`None` for characters valid in both shifts).
pub fn char_to_frame(c: char) -> Result<(u8, Option<Shift>), CodecError> {
    match c {
        'A'..='Z' => Ok((c as u8 - b'A' + 1, Some(Shift::Letters))),
        ' ' => Ok((FRAME_SPACE, None)),
        '\r' => Ok((FRAME_CR, None)),
        '\n' => Ok((FRAME_LF, None)),
        _ => FIGURES
            .iter()
            .position(|&f| f == c)
            .map(|i| (i as u8 + 1, Some(Shift::Figures)))
            .ok_or(CodecError::UnknownChar(c)),
    }
}

/// Every printable character of the code, in frame order per shift.
pub fn repertoire() -> Vec<char> {
    let mut v: Vec<char> = ('A'..='Z').collect();
    v.extend(FIGURES);
    v.extend([' ', '\r', '\n']);
    v
}

/// Encodes text to frames. Decoding starts in letters shift, so a FIGS or
/// LTRS frame is emitted whenever the required shift changes.
pub fn encode_text(text: &str) -> Result<Vec<u8>, CodecError> {
    let mut shift = Shift::Letters;
    let mut out = Vec::with_capacity(text.len());
    for c in text.chars() {
        let (frame, need) = char_to_frame(c)?;
        if let Some(need) = need {
            if need != shift {
                out.push(if need == Shift::Letters {
                    FRAME_LTRS
                } else {
                    FRAME_FIGS
                });
                shift = need;
            }
        }
        out.push(frame);
    }
    Ok(out)
}

/// Stateful frame-to-character decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextDecoder {
    shift: Shift,
}

impl Default for TextDecoder {
    fn default() -> Self {
        TextDecoder {
            shift: Shift::Letters,
        }
    }
}

impl TextDecoder {
    pub fn shift(&self) -> Shift {
        self.shift
    }

    /// Returns the printed character, or `None` for shifts and blank tape.
    pub fn decode(&mut self, frame: u8) -> Result<Option<char>, CodecError> {
        match frame {
            FRAME_BLANK => Ok(None),
            FRAME_LTRS => {
                self.shift = Shift::Letters;
                Ok(None)
            }
            FRAME_FIGS => {
                self.shift = Shift::Figures;
                Ok(None)
            }
            FRAME_SPACE => Ok(Some(' ')),
            FRAME_CR => Ok(Some('\r')),
            FRAME_LF => Ok(Some('\n')),
            1..=26 if self.shift == Shift::Letters => Ok(Some((b'A' + frame - 1) as char)),
            f @ 1..=12 => Ok(Some(FIGURES[f as usize - 1])),
            f if f > FRAME_MASK => Err(CodecError::FrameRange(f)),
            f => Err(CodecError::UnknownFrame {
                frame: f,
                shift: self.shift,
            }),
        }
    }
}

pub fn decode_text(frames: &[u8]) -> Result<String, CodecError> {
    let mut dec = TextDecoder::default();
    let mut s = String::new();
    for &f in frames {
        if let Some(c) = dec.decode(f)? {
            s.push(c);
        }
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Channels

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeviceKind {
    TeletypePrint,
    TeletypePrintPunch,
    TapeReader,
    FastTapeReader,
}

impl DeviceKind {
    pub fn name(self) -> &'static str {
        match self {
            DeviceKind::TeletypePrint => "teletype_print",
            DeviceKind::TeletypePrintPunch => "teletype_print_punch",
            DeviceKind::TapeReader => "tape_reader",
            DeviceKind::FastTapeReader => "fast_tape_reader",
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Input,
    Output,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Input => "input",
            Direction::Output => "output",
        })
    }
}

/// Where a channel's frames go or come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Medium {
    /// Printed frames, kept raw; decode with [`decode_text`].
    Printer(Vec<u8>),
    Punch(TapeImage),
    Reader {
        tape: Option<TapeImage>,
        position: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceChannel {
    pub id: u8,
    pub kind: DeviceKind,
    pub model: &'static str,
    pub rate_cps: u32,
    pub medium: Medium,
}

impl DeviceChannel {
    fn new(id: u8, kind: DeviceKind, model: &'static str, rate_cps: u32, medium: Medium) -> Self {
        DeviceChannel {
            id,
            kind,
            model,
            rate_cps,
            medium,
        }
    }

    /// Microseconds to move one frame, rounded up.
    pub fn frame_time_us(&self) -> u64 {
        frame_time_us(self.rate_cps)
    }

    pub fn direction(&self) -> Direction {
        match self.medium {
            Medium::Reader { .. } => Direction::Input,
            _ => Direction::Output,
        }
    }

    /// Short human summary of what is mounted or captured.
    pub fn summary(&self) -> String {
        match &self.medium {
            Medium::Printer(frames) => format!("{} frames printed", frames.len()),
            Medium::Punch(tape) => format!("{} frames punched", tape.len()),
            Medium::Reader { tape: None, .. } => "no tape".to_string(),
            Medium::Reader {
                tape: Some(t),
                position,
            } => format!("{position}/{} frames read", t.len()),
        }
    }
}

pub fn frame_time_us(rate_cps: u32) -> u64 {
    1_000_000u64.div_ceil(rate_cps.max(1) as u64)
}

/// Device transfer rates, characters per second.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceRates {
    pub teletype_cps: u32,
    pub reader_cps: u32,
    pub fast_reader_cps: u32,
}

impl Default for DeviceRates {
    fn default() -> Self {
        DeviceRates {
            teletype_cps: DEFAULT_TELETYPE_CPS,
            reader_cps: DEFAULT_READER_CPS,
            fast_reader_cps: DEFAULT_FAST_READER_CPS,
        }
    }
}

impl DeviceRates {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.teletype_cps == 0 || self.reader_cps == 0 || self.fast_reader_cps == 0 {
            return Err(DeviceError::ZeroRate);
        }
        Ok(())
    }
}

/// The fixed device roster: `(channel, kind, model)`.
pub const ROSTER: [(u8, DeviceKind, &str); 5] = [
    (0, DeviceKind::TeletypePrint, "Olivetti T2CN"),
    (1, DeviceKind::TeletypePrint, "Olivetti T2CN-PF"),
    (2, DeviceKind::TeletypePrintPunch, "Olivetti T2CN-PF punch"),
    (3, DeviceKind::TapeReader, "Olivetti T2TA10"),
    (4, DeviceKind::FastTapeReader, "Ferranti TR5"),
];

/// Result of moving one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub frame: u8,
    pub elapsed_us: u64,
}

/// Eight channel slots, five populated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceBank {
    channels: [Option<DeviceChannel>; CHANNEL_COUNT],
}

impl DeviceBank {
    pub fn new(rates: DeviceRates) -> Result<DeviceBank, DeviceError> {
        rates.validate()?;
        let mut channels: [Option<DeviceChannel>; CHANNEL_COUNT] = Default::default();
        for (id, kind, model) in ROSTER {
            let (rate, medium) = match kind {
                DeviceKind::TeletypePrint => (rates.teletype_cps, Medium::Printer(Vec::new())),
                DeviceKind::TeletypePrintPunch => (
                    rates.teletype_cps,
                    Medium::Punch(TapeImage::empty(Provenance::Punched)),
                ),
                DeviceKind::TapeReader => (
                    rates.reader_cps,
                    Medium::Reader {
                        tape: None,
                        position: 0,
                    },
                ),
                DeviceKind::FastTapeReader => (
                    rates.fast_reader_cps,
                    Medium::Reader {
                        tape: None,
                        position: 0,
                    },
                ),
            };
            channels[id as usize] = Some(DeviceChannel::new(id, kind, model, rate, medium));
        }
        Ok(DeviceBank { channels })
    }

    pub fn channel(&self, id: u8) -> Result<&DeviceChannel, DeviceError> {
        self.channels
            .get(id as usize)
            .and_then(Option::as_ref)
            .ok_or(DeviceError::Unassigned(id))
    }

    fn channel_mut(&mut self, id: u8) -> Result<&mut DeviceChannel, DeviceError> {
        self.channels
            .get_mut(id as usize)
            .and_then(Option::as_mut)
            .ok_or(DeviceError::Unassigned(id))
    }

    pub fn channels(&self) -> impl Iterator<Item = &DeviceChannel> {
        self.channels.iter().flatten()
    }

    /// Checks that a transfer would succeed without performing it.
    pub fn check(&self, id: u8, direction: Direction) -> Result<(), DeviceError> {
        let ch = self.channel(id)?;
        if ch.direction() != direction {
            return Err(DeviceError::WrongDirection {
                channel: id,
                kind: ch.kind,
                direction,
            });
        }
        if let Medium::Reader { tape, position } = &ch.medium {
            let tape = tape.as_ref().ok_or(DeviceError::NoTape(id))?;
            if *position >= tape.len() {
                return Err(DeviceError::EndOfTape(id));
            }
        }
        Ok(())
    }

    /// Moves one frame. For output `frame` is the frame sent; for input it
    /// is ignored and the frame read is returned.
    pub fn io_transfer(
        &mut self,
        id: u8,
        direction: Direction,
        frame: u8,
    ) -> Result<Transfer, DeviceError> {
        self.check(id, direction)?;
        if direction == Direction::Output && frame > FRAME_MASK {
            return Err(DeviceError::FrameRange(frame));
        }
        let ch = self.channel_mut(id)?;
        let elapsed_us = ch.frame_time_us();
        let frame = match &mut ch.medium {
            Medium::Printer(frames) => {
                frames.push(frame);
                frame
            }
            Medium::Punch(tape) => {
                tape.push(frame);
                frame
            }
            Medium::Reader { tape, position } => {
                let f = tape.as_ref().expect("checked").frames()[*position];
                *position += 1;
                f
            }
        };
        Ok(Transfer { frame, elapsed_us })
    }

    /// Mounts a tape on a reader channel, rewound.
    pub fn mount(&mut self, id: u8, tape: TapeImage) -> Result<(), DeviceError> {
        let ch = self.channel_mut(id)?;
        match &mut ch.medium {
            Medium::Reader {
                tape: slot,
                position,
            } => {
                *slot = Some(tape);
                *position = 0;
                Ok(())
            }
            _ => Err(DeviceError::WrongDirection {
                channel: id,
                kind: ch.kind,
                direction: Direction::Input,
            }),
        }
    }

    pub fn unmount(&mut self, id: u8) -> Result<Option<TapeImage>, DeviceError> {
        let ch = self.channel_mut(id)?;
        match &mut ch.medium {
            Medium::Reader { tape, position } => {
                *position = 0;
                Ok(tape.take())
            }
            _ => Err(DeviceError::WrongDirection {
                channel: id,
                kind: ch.kind,
                direction: Direction::Input,
            }),
        }
    }

    /// Frames printed on a teletype channel.
    pub fn printed(&self, id: u8) -> Result<&[u8], DeviceError> {
        match &self.channel(id)?.medium {
            Medium::Printer(f) => Ok(f),
            _ => Err(DeviceError::WrongDirection {
                channel: id,
                kind: self.channel(id)?.kind,
                direction: Direction::Output,
            }),
        }
    }

    /// Printed output of a teletype channel, decoded.
    pub fn printed_text(&self, id: u8) -> Result<String, CodecError> {
        match self.printed(id) {
            Ok(frames) => decode_text(frames),
            Err(_) => Ok(String::new()),
        }
    }

    pub fn punched(&self) -> Option<&TapeImage> {
        self.channels().find_map(|c| match &c.medium {
            Medium::Punch(t) => Some(t),
            _ => None,
        })
    }

    /// Unread part of the tape on a reader, marked as consumed.
    pub fn take_all(&mut self, id: u8) -> Result<(TapeImage, u64), DeviceError> {
        let ch = self.channel_mut(id)?;
        let per_frame = ch.frame_time_us();
        match &mut ch.medium {
            Medium::Reader { tape, position } => {
                let t = tape.as_ref().ok_or(DeviceError::NoTape(id))?;
                let rest = TapeImage {
                    frames: t.frames[*position..].to_vec(),
                    provenance: t.provenance,
                };
                *position = t.len();
                Ok((rest, per_frame))
            }
            _ => Err(DeviceError::WrongDirection {
                channel: id,
                kind: ch.kind,
                direction: Direction::Input,
            }),
        }
    }
}
