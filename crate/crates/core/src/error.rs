use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A configuration value violates one of the documented constraints.
    #[error("invalid configuration: {constraint}")]
    Validation { constraint: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("masking error: {0}")]
    Masking(String),
    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },
    #[error("alignment error: {0}")]
    Alignment(String),
    /// A loss term or gradient became NaN/inf; carries a dump of the step.
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("schedule step {step} out of range (total steps {total})")]
    Schedule { step: u64, total: u64 },
    #[error("split error: {0}")]
    Split(String),
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn validation(constraint: impl Into<String>) -> Error {
    Error::Validation {
        constraint: constraint.into(),
    }
}
