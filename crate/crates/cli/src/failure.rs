use std::io::ErrorKind;

use orojar_core::Error;

/// A command failure with its exit-code category.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    MissingInput(String),
    #[error("{0}")]
    Runtime(String),
}

impl Failure {
    pub fn category(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::MissingInput(_) => "missing-input",
            Failure::Runtime(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::MissingInput(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }

    /// `error[category]: message` on a single line.
    pub fn line(&self) -> String {
        let msg = self.to_string().lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
        format!("error[{}]: {msg}", self.category())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_) => Failure::Config(msg),
            Error::Io(io) if io.kind() == ErrorKind::NotFound => Failure::MissingInput(msg),
            Error::Format(_) | Error::Version { .. } | Error::Truncated(_) | Error::ParamShape { .. } | Error::ParamSet { .. } => {
                Failure::MissingInput(format!("unusable input: {msg}"))
            }
            _ => Failure::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::from(Error::Io(e))
    }
}
