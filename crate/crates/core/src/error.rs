use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("duplicate entity id `{0}`")]
    DuplicateId(String),

    #[error("no languages requested")]
    NoLanguages,

    #[error("language `{0}` is not indexed in the knowledge base")]
    LanguageNotIndexed(String),

    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("span {start}..{end} in sentence {sentence} is out of bounds")]
    SpanOutOfBounds {
        sentence: usize,
        start: usize,
        end: usize,
    },

    #[error("DEEP objective requires link annotations for the monolingual pool")]
    MissingLinks,

    #[error("example {0} carries no replacement metadata")]
    MissingReplacementMetadata(usize),

    #[error("hypothesis/reference length mismatch: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("reports were computed over different test corpora: {0}")]
    ReportMismatch(String),

    #[error("invalid bin edges: {0}")]
    BinEdges(String),

    #[error("infeasible world spec: {0}")]
    InfeasibleWorld(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("invalid configuration")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
