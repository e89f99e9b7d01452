use std::path::PathBuf;

/// Errors produced by the segmentation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },

    #[error("kernel size must be odd, got {0}x{1}")]
    EvenKernel(usize, usize),

    #[error("target size must be positive, got {0}x{1}")]
    ZeroSize(usize, usize),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    VersionMismatch(u16),

    #[error("truncated payload: needed {needed} bytes, {available} available")]
    TruncatedPayload { needed: usize, available: usize },

    #[error("truncated header")]
    TruncatedHeader,

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("image size {0}x{1} is not divisible by 8")]
    NonDivisibleSize(u32, u32),

    #[error("pyramid grouping mismatch: {0}")]
    GroupingMismatch(String),

    #[error("feature stack has no semantic level")]
    MissingSemantic,

    #[error("k = {k} must be in 1..{n}")]
    InvalidNeighbors { k: usize, n: usize },

    #[error("eigensolver did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("empty candidate list")]
    EmptyCandidates,

    #[error("auxiliary self-matching loss needs ground truth and is unavailable at inference")]
    AuxAtInference,

    #[error("training diverged at epoch {epoch}, episode {episode}: loss is {loss}")]
    Diverged { epoch: usize, episode: usize, loss: f64 },

    #[error("empty corpus at {0}")]
    EmptyCorpus(PathBuf),

    #[error("missing mask for image {0}")]
    MissingMask(String),

    #[error("unknown class index {index} in {file}")]
    UnknownClass { index: u8, file: String },

    #[error("class {class_id} has {available} images, need at least {needed}")]
    InsufficientImages { class_id: u8, available: usize, needed: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
