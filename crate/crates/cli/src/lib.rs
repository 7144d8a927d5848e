//! Command implementations behind the `inaad` binary.

pub mod commands;
pub mod config;

use std::fmt;

pub use crate::commands::{cmd_eval, cmd_score, cmd_synth, cmd_train, ScoreOptions, TrainOptions};
pub use crate::config::RunConfig;

/// Invalid or missing configuration; maps to exit code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let is_config = err.chain().any(|e| {
        e.is::<ConfigError>() || matches!(e.downcast_ref::<inaad_core::Error>(), Some(inaad_core::Error::Config(_)))
    });
    if is_config {
        EXIT_CONFIG
    } else {
        EXIT_FAILURE
    }
}
