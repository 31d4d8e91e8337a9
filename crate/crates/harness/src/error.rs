use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Errors split by who has to act on them: the caller (exit code 1) or us
/// (exit code 2).
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    User(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl HarnessError {
    pub fn user(msg: impl Into<String>) -> Self {
        HarnessError::User(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::User(_) => 1,
            HarnessError::Internal(_) => 2,
        }
    }
}

impl From<planrl_core::Error> for HarnessError {
    fn from(e: planrl_core::Error) -> Self {
        use planrl_core::Error as E;
        match e {
            E::Config(_)
            | E::Format { .. }
            | E::Dataset(_)
            | E::Io(_)
            | E::BufferCapacity { .. }
            | E::DimensionMismatch { .. } => HarnessError::User(e.to_string()),
            _ => HarnessError::Internal(e.to_string()),
        }
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::User(format!("csv: {e}"))
    }
}

/// Wraps an io error with the path it concerns.
pub(crate) fn io_at(path: &std::path::Path, e: std::io::Error) -> HarnessError {
    HarnessError::User(format!("{}: {e}", path.display()))
}
