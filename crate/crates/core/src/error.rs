use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: operand `{operand}` has shape {got:?}, expected {expected}")]
    Shape {
        op: &'static str,
        operand: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("{op}: division by exact zero at element {index}")]
    DivisionByZero { op: &'static str, index: usize },

    #[error("{op}: non-finite value in term `{term}` at {location}")]
    NonFinite {
        op: &'static str,
        term: String,
        location: String,
    },

    #[error("binary file: {msg} (byte offset {offset})")]
    Format { offset: u64, msg: String },

    #[error("rule {rule} selects no pixels at any tap after erosion")]
    EmptyRule { rule: String },

    #[error("optimization diverged at iteration {iteration}: loss {loss} stayed far above the initial {initial}")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
        trace: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        operand: &'static str,
        expected: impl Into<String>,
        got: &[usize],
    ) -> Self {
        Error::Shape {
            op,
            operand,
            expected: expected.into(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }
}
