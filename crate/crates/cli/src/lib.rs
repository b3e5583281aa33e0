//! Command implementations behind the `glyphslot` binary.

mod args;
mod commands;
pub mod supports;

pub use args::*;
pub use commands::{run, trace_path};

/// Process exit status for an error: 2 usage, 3 data, 4 numeric failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use glyphslot::Error;
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::InvalidArgument(_)) => 2,
        Some(Error::Numeric(_) | Error::Shape { .. }) => 4,
        _ => 3,
    }
}
