use std::io;

use thiserror::Error;

/// Problems reading one of the binary artifact formats (key files, checkpoints, wire frames).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },
    #[error("truncated input: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("trailing bytes after payload ({0} bytes)")]
    Trailing(usize),
    #[error("invalid field {field}: {reason}")]
    Field { field: &'static str, reason: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    Param { field: &'static str, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error at position {position}: {reason}")]
    Input { position: usize, reason: String },
    #[error("numerical error{}: {reason}", location_suffix(.epoch, .batch))]
    Numerical {
        epoch: Option<usize>,
        batch: Option<usize>,
        reason: String,
    },
    #[error("key/model incompatibility: {0}")]
    Incompatible(String),
    #[error("horizontal key is not a bijection: {0}")]
    NotBijection(String),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("transport (retryable): {0}")]
    Transport(String),
    #[error("server error {code}: {message}")]
    Remote { code: u16, message: String },
}

fn location_suffix(epoch: &Option<usize>, batch: &Option<usize>) -> String {
    match (epoch, batch) {
        (Some(e), Some(b)) => format!(" (epoch {e}, batch {b})"),
        (Some(e), None) => format!(" (epoch {e})"),
        (None, Some(b)) => format!(" (batch {b})"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Param {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn numerical(reason: impl Into<String>) -> Self {
        Error::Numerical {
            epoch: None,
            batch: None,
            reason: reason.into(),
        }
    }

    /// Attach a training location to a numerical error; other kinds pass through.
    pub(crate) fn at(self, epoch: Option<usize>, batch: Option<usize>) -> Self {
        match self {
            Error::Numerical {
                epoch: e0,
                batch: b0,
                reason,
            } => Error::Numerical {
                epoch: epoch.or(e0),
                batch: batch.or(b0),
                reason,
            },
            other => other,
        }
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }

    /// True for failures a client may retry after reconnecting.
    pub fn is_retryable(&self) -> bool {
        match self {
            Error::Transport(_) => true,
            Error::Round { source, .. } => source.is_retryable(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
