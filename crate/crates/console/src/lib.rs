//! Operator console for the emulator: the `mr` command line and the
//! front-panel protocol service.

pub mod cli;
pub mod panel;
pub mod protocol;
