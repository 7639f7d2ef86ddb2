//! Configuration, caching and report emission for the `rwalk` binary.

use std::path::PathBuf;

use rwalk_core::{GroupError, MeasureError, NumericError};
use thiserror::Error;

pub mod cache;
pub mod commands;
pub mod config;
pub mod table;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Group(#[from] GroupError),
}

impl CliError {
    /// 2 for configuration and input problems, 3 for numerically
    /// inconclusive results, 4 when a resource budget runs out.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io { .. } | CliError::Group(_) => 2,
            CliError::Measure(MeasureError::Resource { .. }) => 4,
            CliError::Measure(_) => 2,
            CliError::Numeric(NumericError::Measure(MeasureError::Resource { .. })) => 4,
            CliError::Numeric(NumericError::Measure(_) | NumericError::Group(_)) => 2,
            CliError::Numeric(NumericError::OutOfRange(_) | NumericError::Invalid(_)) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

/// Worker count: explicit value, then `RWALK_THREADS`, then the machine.
pub fn resolve_threads(explicit: Option<usize>, env: Option<&str>) -> usize {
    explicit
        .or_else(|| env.and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0))
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        let budget = MeasureError::Resource { budget: 1, rows: 0 };
        assert_eq!(CliError::Measure(budget.clone()).exit_code(), 4);
        assert_eq!(
            CliError::Numeric(NumericError::Measure(budget)).exit_code(),
            4
        );
        assert_eq!(
            CliError::Numeric(NumericError::DefectDominates(3)).exit_code(),
            3
        );
    }

    #[test]
    fn thread_resolution() {
        assert_eq!(resolve_threads(Some(3), Some("5")), 3);
        assert_eq!(resolve_threads(None, Some("5")), 5);
        assert!(resolve_threads(None, Some("zero")) >= 1);
        assert!(resolve_threads(None, Some("0")) >= 1);
    }
}
