use thiserror::Error;

/// Errors shared across the numerics, alignment, and training modules.
#[derive(Debug, Error)]
pub enum SgaError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate feature row {row}: norm {norm:.3e} below 1e-12")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("training diverged: non-finite value in `{component}` at step {step}")]
    Divergence { component: String, step: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SgaError>;

impl SgaError {
    pub fn shape(msg: impl Into<String>) -> Self {
        SgaError::Shape(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        SgaError::Numeric(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        SgaError::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        SgaError::Config(msg.into())
    }
}
