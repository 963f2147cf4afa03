use thiserror::Error;

/// Errors raised by the library. The CLI maps these onto exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("observation {y} lies outside the support of the {family} model")]
    Domain { family: &'static str, y: f64 },

    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("vote {decision} has zero probability under the current belief and error pair")]
    ImpossibleObservation { decision: u8 },

    #[error("no agents remain to vote")]
    NoAgentsRemaining,

    #[error("team of {n} agents exceeds the limit of {max} for this computation")]
    TooLarge { n: usize, max: usize },

    #[error("the branch after first vote {0} is already decided")]
    BranchDecided(u8),

    #[error("policy has no threshold for history `{0}`")]
    MissingHistory(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
