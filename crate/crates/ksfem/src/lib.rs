//! Batch driver around `ksfem-core`: configuration files, the adaptive run
//! and its output files.

mod config;
mod output;

use std::path::PathBuf;

pub use config::{parse_config, parse_config_str, RunConfig, KEYS};
pub use output::{run, vtk_text, RunReport};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// `line` is 0 when the problem is not tied to one line.
    #[error("{origin}:{line}: {msg}")]
    Config { origin: String, line: usize, msg: String },
    #[error("solver failed: {0}")]
    Solver(#[from] ksfem_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Process exit status: 2 for configuration, 3 for solver and 4 for I/O
    /// failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Solver(ksfem_core::Error::Io(_)) => 4,
            CliError::Solver(_) => 3,
            CliError::Io { .. } => 4,
        }
    }
}
