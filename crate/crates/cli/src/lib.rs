//! Library side of the `teleop` command: the acceptance suite and the load
//! scenario, shared by the binary and the test targets.

pub mod acceptance;
pub mod load;

/// Process exit codes of the `teleop` binary.
pub mod exit {
    pub const OK: u8 = 0;
    /// Unexpected runtime failure.
    pub const FAILURE: u8 = 1;
    /// Bad flags, config or script.
    pub const USAGE: u8 = 2;
    pub const PORT_IN_USE: u8 = 3;
    /// The run finished but did not meet its expectation or criteria.
    pub const MISMATCH: u8 = 4;
    /// Could not connect, or the server rejected or broke the protocol.
    pub const CONNECTION: u8 = 5;
    /// A replayed episode diverged from its recording.
    pub const DIVERGENCE: u8 = 6;
}
