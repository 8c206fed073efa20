//! Emulator core for an 18-bit, 1024-word transistor computer: gate-level
//! adder networks, instruction set, microcode, devices, machine and tools.

pub mod adder;
pub mod devices;
pub mod isa;
pub mod machine;
pub mod microcode;
pub mod toolchain;

pub use isa::{Instruction, IsaTable, Word};
pub use machine::{
    Machine, MachineConfig, MachineError, MachineState, RunLimits, Status, StopReason,
};
pub use microcode::MicroRom;
