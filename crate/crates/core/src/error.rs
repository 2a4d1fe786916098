use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("range out of bounds: tensor `{name}` spans [{begin}, {end}) but data section holds {available} bytes")]
    RangeOutOfBounds {
        name: String,
        begin: u64,
        end: u64,
        available: u64,
    },

    #[error("overlapping byte ranges: tensors `{first}` and `{second}`")]
    OverlappingRanges { first: String, second: String },

    #[error("unsupported dtype `{dtype}` for tensor `{name}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error(
        "tensor `{name}` declares {expected} bytes for its shape but its range holds {actual}"
    )]
    SizeMismatch {
        name: String,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite value in tensor `{name}` at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("no tensor named `{0}`")]
    MissingTensor(String),

    #[error("`{name}` is not a convolution kernel: expected rank 4, found shape {shape:?}")]
    NotConvKernel { name: String, shape: Vec<usize> },

    #[error("invalid dimensions {0:?}: every dimension must be at least 1")]
    InvalidDims(Vec<usize>),

    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),

    #[error("empty patch")]
    EmptyPatch,

    #[error("patch plan {plan_h}x{plan_w} does not fit image {img_h}x{img_w}")]
    PlanTooLarge {
        plan_h: usize,
        plan_w: usize,
        img_h: usize,
        img_w: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel index {index} out of range for {count} kernels")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("layer `{0}` needs at least 2 kernels for pairwise similarity")]
    TooFewKernels(String),

    #[error("empty similarity sample")]
    EmptySample,

    #[error("cannot aggregate: {0}")]
    Mismatch(String),

    #[error("no CKRM entry for layer `{0}`")]
    MissingCkrm(String),

    #[error("threshold {0} was not analyzed")]
    ThresholdNotAnalyzed(f64),

    #[error("failed to parse {what}: {source}")]
    Parse {
        what: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("no rank-4 tensor matches `{0}`")]
    NoMatchingLayers(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("unsupported schema version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
