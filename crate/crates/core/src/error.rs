use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the model kernels, rearrangements and pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error in {location}: non-finite value")]
    NonFinite { location: String },
    #[error("invalid cohort spec: {0}")]
    Spec(String),
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn dims(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| alloc::format!("{d}")).collect();
    alloc::format!("[{}]", parts.join(", "))
}
