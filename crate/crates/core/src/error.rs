//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the numeric core and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: left {left:?} vs right {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("convolution kernel size {k} must be odd")]
    EvenKernel { k: usize },

    #[error(
        "convolution output size not integral: input {h}x{w}, kernel {k}, stride {stride}, pad {pad}"
    )]
    NonIntegralConv {
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },

    #[error("expected a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("label {label} out of range (< {limit}) at pixel ({row}, {col})")]
    LabelOutOfRange {
        label: usize,
        limit: usize,
        row: usize,
        col: usize,
    },

    #[error("probability map has {got} channels, expected {expected}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("channel sum {sum} at pixel ({row}, {col}) violates normalization (tolerance {tol})")]
    NotNormalized {
        sum: f64,
        row: usize,
        col: usize,
        tol: f64,
    },

    #[error("loss weights invalid: {0}")]
    InvalidLossWeights(String),

    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),

    #[error("no threshold resolved for class {class}")]
    UnresolvedTau { class: usize },

    #[error("no prototype available for class {class}")]
    MissingPrototype { class: usize },

    #[error("open-set spec invalid: {0}")]
    InvalidOpenSetSpec(String),

    #[error("dissimilarity requires at least one target image")]
    EmptyTargetSet,

    #[error("best-source selection requires at least 2 sources, got {0}")]
    TooFewSources(usize),

    #[error("source dataset has no labels; pretraining requires ground truth")]
    UnlabeledSource,

    #[error("frozen source models missing: expected {expected}, got {got}")]
    MissingFrozenSources { expected: usize, got: usize },

    #[error("image too small for scene layout: {h}x{w} (minimum 8x8)")]
    ImageTooSmall { h: usize, w: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parameter file hash mismatch: file has {file:#018x}, expected {expected:#018x}")]
    ConfigHashMismatch { file: u64, expected: u64 },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: String },

    #[error("truncated or malformed file {path}: {detail}")]
    MalformedFile { path: String, detail: String },

    #[error("class id {0} outside palette of {1} entries")]
    PaletteOutOfRange(usize, usize),

    #[error("empty confusion matrix")]
    EmptyConfusion,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
