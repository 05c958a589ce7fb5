//! Process exit codes and the error type that carries them.

use std::fmt;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.code {
            EXIT_CONFIG => "configuration error",
            EXIT_DATA => "data error",
            EXIT_NUMERICAL => "numerical failure",
            _ => "error",
        };
        write!(f, "{kind}: {}", self.message)
    }
}

impl From<faultdiag::Error> for Failure {
    fn from(e: faultdiag::Error) -> Self {
        use faultdiag::Error as E;
        let code = match &e {
            E::InvalidArgument(_) | E::Dimension(_) => EXIT_CONFIG,
            E::Numerical(_) => EXIT_NUMERICAL,
            E::Io { .. } | E::Parse { .. } | E::Empty(_) | E::CorruptModel(_) | E::SchemaVersion { .. } => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}
