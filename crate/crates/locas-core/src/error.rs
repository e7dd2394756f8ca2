//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error type. The variant name is the error category reported
/// by the CLI on failure.
#[derive(Debug, Error)]
pub enum LocasError {
    /// Dimension or indexing mismatch between tensors or configs.
    #[error("ShapeError: {0}")]
    Shape(String),
    /// Non-finite values, divergence, or failed convergence.
    #[error("NumericalError: {0}")]
    Numerical(String),
    /// A gradient vector that is identically zero where a direction is required.
    #[error("DegenerateGradient: {0}")]
    DegenerateGradient(String),
    /// An activation vector with zero norm where a key direction is required.
    #[error("DegenerateActivation: {0}")]
    DegenerateActivation(String),
    /// A requested rank or width exceeds what the configuration allows.
    #[error("CapacityError: {0}")]
    Capacity(String),
    /// Malformed checkpoint or config file.
    #[error("FormatError: {0}")]
    Format(String),
    /// Underlying I/O failure.
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
}

impl LocasError {
    /// Short category name, used for CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            LocasError::Shape(_) => "ShapeError",
            LocasError::Numerical(_) => "NumericalError",
            LocasError::DegenerateGradient(_) => "DegenerateGradient",
            LocasError::DegenerateActivation(_) => "DegenerateActivation",
            LocasError::Capacity(_) => "CapacityError",
            LocasError::Format(_) => "FormatError",
            LocasError::Io(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, LocasError>;
