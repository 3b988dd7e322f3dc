use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KwsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KwsError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("length error: {0}")]
    Length(String),

    #[error("word `{0}` is not in the lexicon")]
    OutOfVocabulary(String),

    #[error("unknown phoneme id {0}")]
    UnknownPhoneme(usize),

    #[error("lexicon contains no valid entries ({malformed} malformed lines)")]
    EmptyLexicon { malformed: usize },

    #[error("size error: {0}")]
    Size(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("phoneme id {0} has no viseme mapping")]
    Unmapped(usize),

    #[error("configuration mismatch: expected digest {expected}, found {found}")]
    ConfigMismatch { expected: String, found: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corpus generation failed: {0}")]
    Generation(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("alignment error: audio has {audio} outputs, video has {video}")]
    Alignment { audio: usize, video: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl KwsError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        KwsError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        KwsError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
