//! Experiment runner around the `fedkrso` library: single runs, grid
//! sweeps, cost tables, and partition reports, all driven by TOML
//! configuration files with dotted sections.

pub mod commands;
pub mod io;

/// Process exit codes.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const GENERAL: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGED: i32 = 3;
    pub const PARTIAL_SWEEP: i32 = 4;
}

/// Exit code for a run-level error.
pub fn code_for(err: &fedkrso::Error) -> i32 {
    match err {
        fedkrso::Error::InvalidConfig(_)
        | fedkrso::Error::InvalidArgument(_)
        | fedkrso::Error::Format(_)
        | fedkrso::Error::PartitionFailure(_) => exit_code::CONFIG,
        fedkrso::Error::Diverged { .. } => exit_code::DIVERGED,
        fedkrso::Error::Protocol(_) | fedkrso::Error::Io(_) => exit_code::GENERAL,
    }
}
