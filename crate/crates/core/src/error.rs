use thiserror::Error;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("integer accumulator overflow")]
    Overflow,
    #[error("parameter set is all zeros; no quantization scale can be derived")]
    DegenerateScale,
    #[error("layer `{layer}` has a standard deviation that quantizes to zero at {bits} bits")]
    DegenerateSigma { layer: String, bits: u8 },
    #[error("non-finite value {0} cannot be quantized")]
    NonFiniteInput(f64),
    #[error("graph shape error: {0}")]
    GraphShape(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("bad magic number")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated: needed {needed} more bytes at offset {offset}")]
    TruncatedFile { offset: usize, needed: usize },
    #[error("payload length mismatch: {0}")]
    PayloadLengthMismatch(String),
    #[error("record count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
