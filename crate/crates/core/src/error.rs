use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape; record a new graph first")]
    TapeConsumed,

    #[error("variable belongs to a different tape")]
    ForeignVar,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("wav: {0}")]
    Wav(#[from] WavError),

    #[error("{kind} file: {reason}")]
    Format {
        kind: &'static str,
        reason: FormatError,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WavError {
    #[error("missing RIFF/WAVE magic")]
    BadMagic,
    #[error("unsupported audio format tag {0} (only PCM is supported)")]
    NotPcm(u16),
    #[error("expected mono audio, found {0} channels")]
    MultiChannel(u16),
    #[error("expected 16-bit samples, found {0}-bit")]
    BitDepth(u16),
    #[error("missing fmt chunk")]
    MissingFormat,
    #[error("missing data chunk")]
    MissingData,
    #[error("truncated {0}")]
    Truncated(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed: {0}")]
    Malformed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
