use thiserror::Error;

/// Errors surfaced by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or lattice mismatch between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid or inconsistent configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid sample content (bad label, non-binary mask, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed file content (PGM, manifest, checkpoint).
    #[error("format error: {0}")]
    Format(String),

    /// API misuse (backward on a non-scalar, empty metric input, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Internal state no longer satisfies its invariants.
    #[error("corruption error: {0}")]
    Corruption(String),

    /// Non-finite value where the numeric contract requires finiteness.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
