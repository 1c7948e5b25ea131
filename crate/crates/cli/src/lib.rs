//! Command implementations behind the `nmt-adapt` binary.

pub mod commands;
pub mod config;
pub mod report;
pub mod store;

use std::fmt;

/// A prerequisite artifact is absent; the message names it.
#[derive(Debug)]
pub struct Missing(pub String);

impl fmt::Display for Missing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing prerequisite artifact {:?}", self.0)
    }
}

impl std::error::Error for Missing {}

/// The configuration is unreadable or invalid.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PREREQUISITE: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// Exit status for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        EXIT_CONFIG
    } else if err.chain().any(|e| e.is::<Missing>()) {
        EXIT_PREREQUISITE
    } else {
        EXIT_RUNTIME
    }
}
