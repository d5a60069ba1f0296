//! Error classes and the process exit code each one maps to.

use std::fmt;
use std::process::ExitCode;

use cyphertalk::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad flags, missing or invalid config fields.
    Usage,
    /// Malformed records in a data file.
    Input,
    /// Artifact with the wrong magic, version or checksum.
    Version,
    /// Key, model and data that do not belong together.
    Incompatible,
    /// Non-finite values during training.
    Numerical,
    Io,
    /// Network failures and server-side rejections.
    Transport,
    /// `bench` ran to completion but some check failed.
    ChecksFailed,
    Internal,
}

impl ErrorClass {
    pub fn code(self) -> u8 {
        match self {
            ErrorClass::Internal => 1,
            ErrorClass::Usage => 2,
            ErrorClass::Input => 3,
            ErrorClass::Version => 4,
            ErrorClass::Incompatible => 5,
            ErrorClass::Numerical => 6,
            ErrorClass::Io => 7,
            ErrorClass::Transport => 8,
            ErrorClass::ChecksFailed => 9,
        }
    }

    pub fn exit_code(self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn of(e: &Error) -> ErrorClass {
        match e {
            Error::Param { .. } | Error::Config(_) => ErrorClass::Usage,
            Error::Input { .. } => ErrorClass::Input,
            Error::Format(_) | Error::NotBijection(_) => ErrorClass::Version,
            Error::Incompatible(_) => ErrorClass::Incompatible,
            Error::Numerical { .. } => ErrorClass::Numerical,
            Error::Io(_) => ErrorClass::Io,
            Error::Protocol(_) | Error::Transport(_) | Error::Remote { .. } => {
                ErrorClass::Transport
            }
            Error::Round { source, .. } => ErrorClass::of(source),
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: ErrorClass,
    pub message: String,
}

impl CliError {
    pub fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        CliError {
            class,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::new(ErrorClass::Usage, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Class of the first recognizable error in the chain.
pub fn classify(err: &anyhow::Error) -> ErrorClass {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.class;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return ErrorClass::of(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ErrorClass::Io;
        }
    }
    ErrorClass::Internal
}
