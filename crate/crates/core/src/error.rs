//! Error taxonomy shared by every module.
//!
//! Three families matter to callers: shape errors (tensor geometry does not
//! line up), configuration errors (the requested architecture is impossible
//! or a parameter store does not match it), and format errors (corrupt or
//! foreign data files). The CLI maps them onto distinct exit codes.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor geometry mismatch (spatial sizes, channel counts, ranks).
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid or inconsistent architecture configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Corrupt, truncated, or unrecognized data file.
    #[error("data format error: {0}")]
    Format(String),

    /// Internal consistency violation (a bug, not a user error).
    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Prefixes the message with the layer that raised it, so shape errors
    /// surfacing from deep inside the network name their origin.
    pub fn at_layer(self, layer: &str) -> Error {
        match self {
            Error::Shape(m) => Error::Shape(format!("layer {layer}: {m}")),
            Error::Config(m) => Error::Config(format!("layer {layer}: {m}")),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
