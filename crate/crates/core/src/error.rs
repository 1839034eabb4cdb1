use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible operand shapes; `op` names the operation that rejected them.
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("schema: missing required column `{0}`")]
    Schema(String),

    #[error("noise schedule: beta[{t}] = {value} is outside (0, 1)")]
    Schedule { t: usize, value: f64 },

    #[error("diffusion step {step} outside 1..={max}")]
    StepRange { step: usize, max: usize },

    #[error("format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Stable process exit code: 2 input, 3 numerical, 4 format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } | Error::Backward(_) | Error::Shape { .. } => 3,
            Error::Format(_) => 4,
            _ => 2,
        }
    }
}

pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
    Error::shape(op, detail)
}
