use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("dilation must be positive, got {0}")]
    InvalidDilation(usize),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced at tape node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value {value} is not a bin center of the {bits}-bit grid")]
    OffGrid { value: f64, bits: u32 },

    #[error("input waveform outside [-1, 1]: sample {index} = {value}")]
    OutOfDomain { index: usize, value: f64 },

    #[error("flow {flow} produced non-finite activations")]
    FlowNonFinite { flow: usize },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: bad magic header")]
    BadMagic,

    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint: truncated")]
    Truncated,

    #[error("checkpoint: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("classifier has not been trained")]
    UntrainedClassifier,

    #[error("classifier accuracy {accuracy:.3} below the usable floor {floor:.2}")]
    ClassifierTooWeak { accuracy: f64, floor: f64 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("wav: sample {index} = {value} outside [-1, 1]")]
    WavRange { index: usize, value: f64 },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
