use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },

    #[error("cannot parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("invalid value: {0}")]
    Invalid(String),

    // backend
    #[error("unknown prompt template `{0}`")]
    UnknownTemplate(String),
    #[error("template `{template_id}` has unbound placeholder {{{name}}}")]
    UnboundPlaceholder { template_id: String, name: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("upstream returned status {status}: {body}")]
    Upstream { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("no fixture for template `{template_id}` (vars hash {vars_hash})")]
    FixtureMiss {
        template_id: String,
        vars_hash: String,
    },
    #[error("missing API key: environment variable `{0}` is not set")]
    MissingApiKey(String),

    // wsi
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("slide {slide_id} has no image at level {level}")]
    MissingLevelImage { slide_id: String, level: u32 },
    #[error("patch {0} has no level-1 sub-tiles in the manifest")]
    MissingSubTiles(String),
    #[error("could not parse agent response for {stage} after re-prompt")]
    ParseFailure { stage: String },

    // gene
    #[error("gene category {0} is empty")]
    EmptyCategory(String),
    #[error("all gene categories are empty")]
    AllCategoriesEmpty,

    // bank / retrieval
    #[error("bank already holds an entry for ({case_id}, {modality})")]
    DuplicateEntry { case_id: String, modality: String },
    #[error("corrupt bank {path}: {reason}")]
    CorruptBank { path: PathBuf, reason: String },
    #[error("WSI and gene banks share no case ids")]
    NoOverlap,
    #[error("retrieval weights must be non-negative and sum to 1, got ({0}, {1})")]
    WeightsNotNormalized(f64, f64),
    #[error("retrieval index is empty")]
    EmptyIndex,
    #[error("leakage: {0}")]
    Leakage(String),

    // inference
    #[error("need at least 4 scores for quartiles, got {0}")]
    TooFewScores(usize),
    #[error("no expert predictions for case {0}")]
    MissingExpertPredictions(String),
    #[error("survival time must be positive, got {0}")]
    NonPositiveTime(f64),

    // survstats
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("no events in either group")]
    NoEvents,
    #[error("median split leaves one group empty")]
    DegenerateSplit,
    #[error("need at least {k} cases for {k} folds, got {n}")]
    TooFewCases { n: usize, k: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, error: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            error,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }

    /// Errors worth retrying at the transport layer.
    pub fn is_transient(&self) -> bool {
        match self {
            Error::Timeout { .. } | Error::Transport(_) => true,
            Error::Upstream { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}
