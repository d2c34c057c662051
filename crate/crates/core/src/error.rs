use std::path::PathBuf;

/// Every failure the pipeline can surface, grouped by how a caller should react.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid transcript: {0}")]
    InvalidTranscript(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A remote or scripted backend failed; retrying later may succeed.
    #[error("transient backend error: {0}")]
    TransientBackend(String),

    #[error("degenerate generation: {0}")]
    DegenerateGeneration(String),

    #[error("classifier completion could not be parsed: {0}")]
    ClassifierParse(String),

    #[error("sequence of {units} units exceeds the limit of {limit}")]
    SequenceLength { units: usize, limit: usize },

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contract error: {0}")]
    Contract(String),

    /// The evaluation environment itself is broken (e.g. the gold query fails).
    #[error("environment error: {0}")]
    Environment(String),

    #[error("synthesis error: {0}")]
    Synthesis(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Sql(#[from] rusqlite::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for failures caused by bad configuration or missing inputs rather
    /// than by something going wrong at run time.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Checkpoint { .. } | Error::Precondition(_)
        )
    }

    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::TransientBackend(_) | Error::ClassifierParse(_) | Error::DegenerateGeneration(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
