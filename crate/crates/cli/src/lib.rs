//! Experiment plumbing behind the `dfm` binary: dataset generation,
//! training, translation, evaluation and the reproduction runs.

pub mod commands;
pub mod config;
pub mod reproduce;
pub mod svg;

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dfm::Error),
    #[error("config{}: {msg}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
