//! Training, sampling, evaluation and benchmarking around the core
//! library: dataset ingestion, the epoch loop, image emission, and the
//! generation-latency harness. Everything here is deterministic under a
//! fixed seed; wall-clock numbers go to their own file so the remaining
//! outputs are byte-reproducible.

pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod evalcmd;
pub mod images;
pub mod sample;
pub mod trainer;

use std::fmt;

/// Command failure with its process exit code: 1 config, 2 data, 3 numeric.
#[derive(Debug)]
pub enum CmdError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) => 1,
            CmdError::Data(_) => 2,
            CmdError::Numeric(_) => 3,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CmdError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CmdError::Data(msg.into())
    }
}

impl fmt::Display for CmdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CmdError::Config(m) => write!(f, "configuration error: {m}"),
            CmdError::Data(m) => write!(f, "data error: {m}"),
            CmdError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for CmdError {}

impl From<vssm_core::Error> for CmdError {
    fn from(e: vssm_core::Error) -> Self {
        match e {
            vssm_core::Error::Numeric(m) => CmdError::Numeric(m),
            vssm_core::Error::Format(m) => CmdError::Data(m),
            vssm_core::Error::Usage(m) => CmdError::Config(m),
        }
    }
}

pub type CmdResult<T> = Result<T, CmdError>;

/// IO failures on user-supplied data paths.
pub fn io_data(path: &std::path::Path, e: std::io::Error) -> CmdError {
    CmdError::Data(format!("{}: {e}", path.display()))
}

/// IO failures on output paths (bad --out etc.).
pub fn io_config(path: &std::path::Path, e: std::io::Error) -> CmdError {
    CmdError::Config(format!("{}: {e}", path.display()))
}
