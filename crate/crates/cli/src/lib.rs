//! Configuration-driven experiment runner for two-timescale TDC.
//!
//! The binary `twoscale` is a thin wrapper over [`cli::execute`]; everything
//! it does is reachable from this library so tests can drive it in-process.

use std::fmt;

use serde::Serialize;

pub mod cli;
pub mod config;
pub mod experiment;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, Prepared, Summary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    Validation,
    Divergence,
    Io,
}

/// Any failure that ends a command, with its exit status.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub kind: FailureKind,
    pub message: String,
}

impl Failure {
    pub fn validation(msg: impl fmt::Display) -> Self {
        Self { kind: FailureKind::Validation, message: msg.to_string() }
    }

    pub fn divergence(msg: impl fmt::Display) -> Self {
        Self { kind: FailureKind::Divergence, message: msg.to_string() }
    }

    pub fn io(msg: impl fmt::Display) -> Self {
        Self { kind: FailureKind::Io, message: msg.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            FailureKind::Validation => 2,
            FailureKind::Divergence => 3,
            FailureKind::Io => 4,
        }
    }

    /// Single-line JSON error record: `{"error": kind, "exit_code": n, "message": ...}`.
    pub fn record(&self) -> String {
        serde_json::json!({ "error": self.kind, "exit_code": self.exit_code(), "message": self.message }).to_string()
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

impl std::error::Error for Failure {}
