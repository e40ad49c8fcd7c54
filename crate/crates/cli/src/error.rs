use std::path::PathBuf;

use gmwb::GmwbError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot use config file {}: {reason}", path.display())]
    Config { path: PathBuf, reason: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Model(#[from] GmwbError),

    #[error("output error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config { .. } | Self::Usage(_) => 2,
            Self::Model(e) => match e {
                GmwbError::GridCondition(_) => 3,
                GmwbError::NoSignChange { .. } => 4,
                GmwbError::ControlsNotStored(_) => 5,
                GmwbError::InvalidParameter { .. } => 2,
                _ => 1,
            },
            Self::Io(_) | Self::Csv(_) => 1,
        }
    }
}
