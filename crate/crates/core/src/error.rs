use thiserror::Error;

#[derive(Debug, Error)]
pub enum MalmError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for config key `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("record `{id}`: missing required field `{field}`")]
    MissingField { id: String, field: String },
    #[error("schema error in field `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("non-finite loss component `{component}`")]
    NonFinite { component: String },
    #[error("training diverged at step {step}: `{component}` is not finite")]
    Diverged {
        step: usize,
        component: String,
        last_good: Box<crate::model::Malm>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, MalmError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(MalmError::Invalid(msg.into()))
}
