//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Malformed input data (corpus, cluster, distribution or model files).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad or inconsistent pipeline configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage was started before its prerequisites ran.
    #[error("missing artifact {artifact}: run the `{stage}` stage first")]
    MissingArtifact { artifact: PathBuf, stage: String },

    /// An on-disk artifact was produced under a different configuration.
    #[error("stale artifact for stage `{stage}`: {detail}; delete the work directory or rerun from that stage")]
    StaleArtifact { stage: String, detail: String },
}

impl Error {
    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for i/o failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::File { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
