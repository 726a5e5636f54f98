use crate::types::TokenId;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A constructor or configuration field failed validation.
    #[error("invalid {field}: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    /// An operation that needs the full normalizer received a top-k slice.
    #[error("distribution is truncated; full support required")]
    TruncatedDistribution,

    /// Detection needs at least one position with a complete prefix n-gram.
    #[error("token sequence too short: {len} tokens, need more than {min}")]
    SequenceTooShort { len: usize, min: usize },

    #[error("empty input: {what}")]
    EmptyInput { what: &'static str },

    /// The oracle cannot serve this request (e.g. exact probabilities from a
    /// sampling-only endpoint).
    #[error("oracle does not support {capability}")]
    Capability { capability: &'static str },

    /// Strength estimation collected no cross-threshold score pairs.
    #[error(
        "no cross-threshold score pairs collected after {rounds} rounds; \
         increase the repeat count or the target set size"
    )]
    InsufficientSignal { rounds: usize },

    /// A decoding step saw a candidate with no red/green classification.
    #[error("no color available for token {token}")]
    Unclassified { token: TokenId },

    #[error("transport failure (retryable: {retryable}): {msg}")]
    Transport { msg: String, retryable: bool },

    #[error("authentication rejected by remote endpoint: {msg}")]
    Auth { msg: String },

    #[error("malformed remote response: missing {what}")]
    MalformedResponse { what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
    }

    /// Whether a retry could plausibly succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            Error::Transport {
                retryable: true,
                ..
            }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
