use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("stage `{next}` cannot consume the output of `{prev}`: {source}")]
    Composition {
        prev: String,
        next: String,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("{stage} is stochastic and needs a fixed rng key")]
    NeedsKey { stage: String },
    #[error("lens json: {0}")]
    Json(String),
}

impl Error {
    pub fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
