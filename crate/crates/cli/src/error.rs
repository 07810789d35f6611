use std::path::Path;

use baylm::checkpoint::CheckpointError;
use baylm::corpus::CorpusError;
use baylm::eval::interp::MixtureError;
use baylm::eval::nbest::NBestError;
use baylm::model::ModelError;
use baylm::ngram::ArpaError;
use baylm::train::TrainError;

/// Every failure maps onto one of three exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    /// Prefixes the file name unless the message has it, keeping the
    /// category.
    pub fn with_file(self, path: &Path) -> Self {
        self.with_key(&path.display().to_string())
    }

    /// Prefixes the offending config key or file.
    pub fn with_key(self, key: &str) -> Self {
        let m = match &self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        };
        if m.contains(key) {
            return self;
        }
        match self {
            CliError::Config(m) => CliError::Config(format!("{key}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{key}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{key}: {m}")),
        }
    }

    /// Names the file a data-level error came from.
    pub fn in_file(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::in_file(path, e)
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Shape(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::EmptyCorpus => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Mismatch(_) => CliError::Config(e.to_string()),
            CheckpointError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ArpaError> for CliError {
    fn from(e: ArpaError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NBestError> for CliError {
    fn from(e: NBestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MixtureError> for CliError {
    fn from(e: MixtureError) -> Self {
        match e {
            MixtureError::EmptyDev => CliError::Data(e.to_string()),
            _ => CliError::Config(format!("interp: {e}")),
        }
    }
}
