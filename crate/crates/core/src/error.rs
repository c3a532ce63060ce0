use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by the CLI exit code they map to: data problems
/// (malformed files, impossible sampling requests) exit with 2, numerical
/// problems (non-PD matrices, divergence) with 3.
#[derive(Debug, Error)]
pub enum TeamError {
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("constraint error: {0}")]
    Constraint(String),

    #[error("degenerate episode: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("training diverged at episode {episode}: loss = {loss}")]
    Diverged { episode: usize, loss: f64 },

    #[error("trial {trial} failed: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<TeamError>,
    },
}

impl TeamError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TeamError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            TeamError::Format(_)
            | TeamError::Io { .. }
            | TeamError::Sampling(_)
            | TeamError::Constraint(_)
            | TeamError::Degenerate(_) => 2,
            TeamError::Parameter(_) => 1,
            TeamError::Domain(_) | TeamError::Consistency(_) | TeamError::Diverged { .. } => 3,
            TeamError::Trial { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T, E = TeamError> = std::result::Result<T, E>;
