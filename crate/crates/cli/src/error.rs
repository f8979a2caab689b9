use std::path::PathBuf;

use ipm_ot_core::Error as CoreError;
use serde_json::json;
use thiserror::Error;

/// Failures of a run, grouped by the exit status they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: row {row}, column {column}: cannot parse {value:?} as a number")]
    Parse { path: PathBuf, row: usize, column: String, value: String },

    #[error("{path}: row {row} has {found} fields, expected {expected}")]
    RaggedRows { path: PathBuf, row: usize, found: usize, expected: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Parse { .. } => "parse",
            CliError::RaggedRows { .. } => "ragged_rows",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
            CliError::Io { .. } => "io",
        }
    }

    /// 2 for configuration problems, 3 for bad or unreadable data, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Parse { .. } | CliError::RaggedRows { .. } | CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": { "kind": self.kind(), "message": self.to_string(), "exit_code": self.exit_code() } })
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidConfig(_) => CliError::Config(e.to_string()),
            CoreError::NonFiniteObjective | CoreError::InfeasibleStart(_) | CoreError::NumericalUnderflow(_) => {
                CliError::Numerical(e.to_string())
            }
            CoreError::NonFiniteInput(_)
            | CoreError::NegativeMass(_)
            | CoreError::NegativeWeight { .. }
            | CoreError::Empty(_)
            | CoreError::DimensionMismatch(_)
            | CoreError::SupportViolation { .. }
            | CoreError::MassMismatch { .. }
            | CoreError::TooLarge(_)
            | CoreError::EmptyClass { .. } => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_class() {
        assert_eq!(CliError::from(CoreError::InvalidConfig("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(CoreError::EmptyClass { class: 1 }).exit_code(), 3);
        assert_eq!(CliError::from(CoreError::NonFiniteObjective).exit_code(), 4);
        let e = CliError::Parse { path: "a.csv".into(), row: 2, column: "x".into(), value: "abc".into() };
        assert_eq!(e.exit_code(), 3);
        assert_eq!(e.to_json()["error"]["kind"], "parse");
    }
}
