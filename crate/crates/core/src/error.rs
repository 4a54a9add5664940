// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GraceError>;

#[derive(Debug, Error)]
pub enum GraceError {
    /// Malformed header, bad magic, truncated payload, unparsable line.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input carrying an invalid value.
    #[error("data error at row {row}, col {col}: {msg}")]
    Data { row: usize, col: usize, msg: String },

    /// A score was recorded at a step not strictly after the previous one.
    #[error("ordering error: sample {id} has step {last}, got step {step}")]
    Ordering { id: usize, last: u64, step: u64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error in `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("resource error: {0}")]
    Resource(String),

    #[error("provider error: {0}")]
    Provider(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GraceError {
    pub fn domain(msg: impl Into<String>) -> Self {
        GraceError::Domain(msg.into())
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        GraceError::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GraceError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage/config, 3 data/format, 4 resource.
    pub fn exit_code(&self) -> i32 {
        match self {
            GraceError::Config { .. } | GraceError::Domain(_) => 2,
            GraceError::Format(_)
            | GraceError::Data { .. }
            | GraceError::Ordering { .. }
            | GraceError::Io { .. }
            | GraceError::Provider(_) => 3,
            GraceError::Resource(_) => 4,
        }
    }
}
