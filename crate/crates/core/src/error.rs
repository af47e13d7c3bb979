use std::path::PathBuf;

/// Error type shared by the whole codec.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("frame has no valid pixels")]
    EmptyFrame,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("graph construction: {0}")]
    GraphConstruction(String),

    #[error("graph state: {0}")]
    GraphState(String),

    #[error("entropy stream: {0}")]
    EntropyStream(String),

    #[error("symbol {symbol} outside alphabet of size {alphabet}")]
    SymbolOutOfAlphabet { symbol: i64, alphabet: usize },

    #[error("unsupported container format: {0}")]
    UnsupportedFormat(String),

    #[error("container parse error at record {record}: {reason}")]
    ContainerParse { record: usize, reason: String },

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("training diverged: non-finite {0}")]
    TrainingDiverged(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
