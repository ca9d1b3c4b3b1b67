use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("beam index {index} out of range for {num_beams} beams")]
    BeamIndex { index: i64, num_beams: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing odometry for seq {0}")]
    MissingOdometry(u64),

    #[error("unknown seq {0}")]
    UnknownSeq(u64),

    #[error("seq mismatch: {0}")]
    SeqMismatch(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("weight file: {0}")]
    CorruptWeights(String),

    #[error("weight file format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("model config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("backward called without a training-mode forward cache")]
    MissingCache,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Short stable tag for machine-parseable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::BeamIndex { .. } => "beam_index",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::MissingOdometry(_) => "missing_odometry",
            Error::UnknownSeq(_) => "unknown_seq",
            Error::SeqMismatch(_) => "seq_mismatch",
            Error::Parse { .. } => "parse",
            Error::CorruptWeights(_) => "corrupt_weights",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::ConfigMismatch(_) => "config_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::Empty(_) => "empty",
            Error::MissingCache => "missing_cache",
            Error::Io { .. } => "io",
        }
    }
}
