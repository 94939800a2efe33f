//! Pipeline commands behind the `pyroemu` binary.

pub mod commands;
pub mod config;

pub use config::{GridPoint, RunConfig};

/// Process exit status for an error: 2 for a missing prerequisite,
/// 3 for a numerical failure, 1 for everything else.
pub fn exit_code(err: &pyroemu::Error) -> i32 {
    match err {
        pyroemu::Error::Missing { .. } => 2,
        pyroemu::Error::Numerical(_) => 3,
        _ => 1,
    }
}
