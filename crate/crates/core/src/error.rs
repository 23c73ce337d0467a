use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial grid {h}x{w} must have even extents")]
    OddGrid { h: usize, w: usize },
    #[error("non-finite value in softmax input")]
    NonFiniteInput,
    #[error("loss node must be a scalar, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("image {h}x{w} is not divisible by patch size {patch}")]
    IndivisibleImage { h: usize, w: usize, patch: usize },
    #[error("feature width {got} does not match embedding width {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("frame manifest is empty")]
    EmptyManifest,
    #[error("timestamp {0} is negative")]
    NegativeTimestamp(f64),
    #[error("invalid frame bundle: {0}")]
    InvalidBundle(String),
    #[error("answer span selects no target positions")]
    EmptyTarget,
    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("model client failed: {0}")]
    ClientFailure(String),
    #[error("frames at {first}s and {second}s round to the same second")]
    DuplicateSecond { first: f64, second: f64 },
    #[error("caption map is empty")]
    EmptyCaptions,
    #[error("scene filter response {0:?} is neither yes nor no")]
    AmbiguousFilterResponse(String),
    #[error("could not parse QA response: {0}")]
    ParseError(String),
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("image file: {0}")]
    ImageFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the environment (files, network) rather than
    /// violations of an operation's contract.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::ClientFailure(_))
    }
}
