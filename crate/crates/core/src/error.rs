use thiserror::Error;

use crate::model::QueryKind;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    #[error("unknown disclosure category `{0}`")]
    UnknownCategory(String),
    #[error("invalid document context: {0}")]
    InvalidContext(String),
    #[error("k must be finite and non-negative, got {0}")]
    InvalidK(f64),
    #[error("{kind} answer {value} is out of bounds")]
    AnswerOutOfBounds { value: f64, kind: QueryKind },
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
