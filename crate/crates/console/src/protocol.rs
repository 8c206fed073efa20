//! Panel protocol messages. `docs/panel-protocol.md` is the normative schema.

use base64::Engine;
use mr_core::devices::TapeImage;
use mr_core::isa::{format_address, parse_address, Word};
use mr_core::machine::{Machine, StepReport, PLANE_COUNT};
use serde::{Deserialize, Serialize};

/// Client to server, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum WireCommand {
    Start,
    Stop,
    Step,
    StepMicro,
    Reset,
    Deposit { addr: String, word: String },
    Examine { addr: String },
    SetPc { addr: String },
    SelectPlane { plane: usize },
    MountTape { channel: u8, image: String },
    SetBreakpoint { addr: String },
    ClearBreakpoint { addr: String },
    Boot,
}

/// A command after validation; only these reach the machine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Start,
    Stop,
    Step,
    StepMicro,
    Reset,
    Deposit(u16, Word),
    Examine(u16),
    SetPc(u16),
    SelectPlane(usize),
    MountTape(u8, TapeImage),
    SetBreakpoint(u16),
    ClearBreakpoint(u16),
    Boot,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Start => "start",
            Command::Stop => "stop",
            Command::Step => "step",
            Command::StepMicro => "step_micro",
            Command::Reset => "reset",
            Command::Deposit(..) => "deposit",
            Command::Examine(_) => "examine",
            Command::SetPc(_) => "set_pc",
            Command::SelectPlane(_) => "select_plane",
            Command::MountTape(..) => "mount_tape",
            Command::SetBreakpoint(_) => "set_breakpoint",
            Command::ClearBreakpoint(_) => "clear_breakpoint",
            Command::Boot => "boot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolError {
    pub cmd: Option<String>,
    pub message: String,
}

impl ProtocolError {
    fn new(cmd: Option<&str>, message: impl Into<String>) -> Self {
        ProtocolError {
            cmd: cmd.map(str::to_string),
            message: message.into(),
        }
    }
}

/// Parses and validates one line from a client.
pub fn parse_command(line: &str) -> Result<Command, ProtocolError> {
    let raw: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| ProtocolError::new(None, format!("malformed JSON: {e}")))?;
    let name = raw.get("cmd").and_then(|c| c.as_str()).map(str::to_string);
    let name = name.as_deref();
    let wire: WireCommand =
        serde_json::from_value(raw.clone()).map_err(|e| ProtocolError::new(name, e.to_string()))?;
    // Unit variants of a tagged enum ignore extra keys, so check them here.
    let known = serde_json::to_value(&wire).expect("commands serialize");
    if let (Some(got), Some(known)) = (raw.as_object(), known.as_object()) {
        if let Some(extra) = got.keys().find(|k| !known.contains_key(*k)) {
            return Err(ProtocolError::new(name, format!("unknown field `{extra}`")));
        }
    }
    let bad = |m: String| ProtocolError::new(name, m);
    let addr = |s: &str| parse_address(s).map_err(|e| bad(e.to_string()));
    Ok(match wire {
        WireCommand::Start => Command::Start,
        WireCommand::Stop => Command::Stop,
        WireCommand::Step => Command::Step,
        WireCommand::StepMicro => Command::StepMicro,
        WireCommand::Reset => Command::Reset,
        WireCommand::Boot => Command::Boot,
        WireCommand::Deposit { addr: a, word } => Command::Deposit(
            addr(&a)?,
            Word::parse_octal(&word).map_err(|e| bad(e.to_string()))?,
        ),
        WireCommand::Examine { addr: a } => Command::Examine(addr(&a)?),
        WireCommand::SetPc { addr: a } => Command::SetPc(addr(&a)?),
        WireCommand::SetBreakpoint { addr: a } => Command::SetBreakpoint(addr(&a)?),
        WireCommand::ClearBreakpoint { addr: a } => Command::ClearBreakpoint(addr(&a)?),
        WireCommand::SelectPlane { plane } => {
            if plane >= PLANE_COUNT {
                return Err(bad(format!("plane {plane} out of range 0..18")));
            }
            Command::SelectPlane(plane)
        }
        WireCommand::MountTape { channel, image } => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(image.as_bytes())
                .map_err(|e| bad(format!("image is not base64: {e}")))?;
            let tape = TapeImage::from_bytes(&bytes).map_err(|e| bad(e.to_string()))?;
            Command::MountTape(channel, tape)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaneRows {
    pub index: usize,
    pub rows: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSummary {
    pub channel: u8,
    pub model: String,
    pub kind: String,
    pub rate_cps: u32,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LastStep {
    pub address: String,
    pub word: String,
    pub disassembly: String,
    pub elapsed_us: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

impl LastStep {
    pub fn from_report(r: &StepReport, machine: &Machine) -> LastStep {
        LastStep {
            address: format_address(r.address),
            word: r.word.to_string(),
            disassembly: machine.disassemble(r.word),
            elapsed_us: r.elapsed_us,
            warning: r.warning.clone(),
        }
    }
}

/// Machine state as shown on the panel, always taken between microwords.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub seq: u64,
    pub pc: String,
    pub acc: String,
    pub ir: String,
    pub overflow: bool,
    pub status: String,
    pub phase: String,
    pub sim_time_us: u64,
    pub plane: PlaneRows,
    pub devices: Vec<DeviceSummary>,
    pub breakpoints: Vec<String>,
    pub last_step: Option<LastStep>,
}

impl Snapshot {
    pub fn capture(
        machine: &Machine,
        seq: u64,
        plane: usize,
        last_step: Option<LastStep>,
    ) -> Snapshot {
        let s = machine.state();
        Snapshot {
            seq,
            pc: format_address(s.pc()),
            acc: s.acc.to_string(),
            ir: s.ir.to_string(),
            overflow: s.overflow,
            status: s.status.name().to_string(),
            phase: s.phase.name().to_string(),
            sim_time_us: s.sim_time_us(),
            plane: PlaneRows {
                index: plane,
                rows: s.plane_view(plane).expect("plane validated").rows(),
            },
            devices: machine
                .devices()
                .channels()
                .map(|c| DeviceSummary {
                    channel: c.id,
                    model: c.model.to_string(),
                    kind: c.kind.name().to_string(),
                    rate_cps: c.rate_cps,
                    summary: c.summary(),
                })
                .collect(),
            breakpoints: s.breakpoints.iter().map(|&b| format_address(b)).collect(),
            last_step,
        }
    }
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Hello {
        role: String,
    },
    State(Box<Snapshot>),
    Examine {
        addr: String,
        word: String,
    },
    Error {
        #[serde(skip_serializing_if = "Option::is_none", default)]
        cmd: Option<String>,
        message: String,
    },
}

impl Event {
    pub fn error(e: ProtocolError) -> Event {
        Event::Error {
            cmd: e.cmd,
            message: e.message,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}
