//! Error categories and exit codes. Every failure prints exactly one line:
//! `error[<category>]: <message>`.

use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Data(String),
    Model(String),
    Train(String),
    Checkpoint(String),
    /// A verification command ran but its check failed.
    Check(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Data(_) => "data",
            CliError::Model(_) => "model",
            CliError::Train(_) => "train",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Check(_) => "check",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Data(_) => 5,
            CliError::Model(_) => 6,
            CliError::Train(_) => 7,
            CliError::Checkpoint(_) => 8,
            CliError::Check(_) => 9,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Io(m)
            | CliError::Data(m)
            | CliError::Model(m)
            | CliError::Train(m)
            | CliError::Checkpoint(m)
            | CliError::Check(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message().replace('\n', " ");
        write!(f, "error[{}]: {}", self.category(), one_line)
    }
}

impl From<stoei::dataset::DatasetError> for CliError {
    fn from(e: stoei::dataset::DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<stoei::trainer::TrainError> for CliError {
    fn from(e: stoei::trainer::TrainError) -> Self {
        use stoei::trainer::TrainError as E;
        match e {
            E::Data(d) => d.into(),
            E::Audio { .. } | E::MissingAudio(_) | E::Template { .. } => CliError::Data(e.to_string()),
            E::Model(_) => CliError::Model(e.to_string()),
            E::BadConfig(_) => CliError::Config(e.to_string()),
            E::DivergedLoss { .. } => CliError::Train(e.to_string()),
        }
    }
}

impl From<stoei::model::ModelError> for CliError {
    fn from(e: stoei::model::ModelError) -> Self {
        CliError::Model(e.to_string())
    }
}

impl From<stoei::checkpoint::CheckpointError> for CliError {
    fn from(e: stoei::checkpoint::CheckpointError) -> Self {
        CliError::Checkpoint(e.to_string())
    }
}
