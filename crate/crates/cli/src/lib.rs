//! Run orchestration for the `bridge` binary: config files, checkpoints,
//! and the four commands (train, eval, synth, gradcheck).
//!
//! Everything here is deliberately thin plumbing around `bridge-core`;
//! the library surface exists so integration tests can run commands
//! in-process and compare against the core APIs directly.

pub mod checkpoint;
pub mod config;
pub mod run;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {reason}")]
    Config { reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {reason}")]
    Checkpoint { reason: String },
    #[error(
        "config digest {found} does not match the checkpoint's {expected}; \
         pass --allow-digest-mismatch to evaluate anyway"
    )]
    DigestMismatch { expected: String, found: String },
    #[error(transparent)]
    Data(#[from] bridge_core::data::DataError),
    #[error(transparent)]
    Model(#[from] bridge_core::model::ModelError),
    #[error(transparent)]
    Train(#[from] bridge_core::train::TrainError),
    #[error(transparent)]
    Eval(#[from] bridge_core::eval::EvalError),
}

impl CliError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
