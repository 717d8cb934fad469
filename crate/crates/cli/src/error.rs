use std::path::Path;

/// Failure of a command, grouped by process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    /// Bad flags or configuration values.
    #[error("{0}")]
    Usage(String),
    /// Unreadable, malformed or mismatched input files.
    #[error("{0}")]
    Data(String),
    /// NaN/inf during training or inference.
    #[error("{0}")]
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Failure::Data(format!("{}: {err}", path.display()))
    }
}

impl From<care_core::Error> for Failure {
    fn from(e: care_core::Error) -> Self {
        use care_core::Error as E;
        match e {
            E::NonFiniteLoss { .. } | E::NonFiniteGradient(_) => Failure::Numeric(e.to_string()),
            E::InvalidConfig(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Failure>;
