use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on axis {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    #[error("degenerate length: {0}")]
    DegenerateLength(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("unsupported audio codec: {0}")]
    UnsupportedCodec(String),

    #[error("truncated audio header: {0}")]
    TruncatedHeader(String),

    #[error("audio file has no sample data: {0}")]
    EmptyAudio(String),

    #[error("utterance {utterance_id}: {source}")]
    Utterance {
        utterance_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("protocol {path}:{line}: {detail}")]
    Protocol {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unknown parameter in checkpoint: {0}")]
    UnknownParameter(String),

    #[error("non-finite activation in layer {0}")]
    NonFinite(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr:e})")]
    Divergence { epoch: usize, batch: usize, lr: f32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_utterance(self, utterance_id: &str) -> Self {
        Error::Utterance {
            utterance_id: utterance_id.to_string(),
            source: Box::new(self),
        }
    }
}
