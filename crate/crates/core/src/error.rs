use thiserror::Error;

/// Crate-wide error type.
///
/// `Shape` covers dimension mismatches that make a request meaningless;
/// `Domain` covers values outside the mathematical domain of an operation
/// (non-SPD metric, negative rates, reducible chains where irreducibility is
/// required, and so on); `Numerical` covers solver failures (no convergence,
/// singular systems); `Unsupported` covers structurally valid requests the
/// implementation declines (size caps, missing optional spec fields).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    // No `{0}` here: `#[from]` already wires the inner error up as `source()`,
    // and the chain printer would repeat it.
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("serialization error")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }
}
