use thiserror::Error;

use crate::clients::ClientError;
use crate::matrix::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid generation plan: {0}")]
    InvalidPlan(String),
    #[error("insufficient images: need at least 2, got {0}")]
    InsufficientImages(usize),
    #[error("undefined correlation: input is constant")]
    UndefinedCorrelation,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("id mismatch: {0}")]
    IdMismatch(String),
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("unknown image id {0:?}")]
    UnknownImage(String),
    #[error("unknown voxel id {0:?}")]
    UnknownVoxel(String),
    #[error("no positives")]
    NoPositives,
    #[error("no semantic negatives")]
    NoSemanticNegatives,
    #[error("no counterfactual pairs")]
    NoCounterfactualPairs,
    #[error("no causal evidence: neither semantic negatives nor counterfactual pairs available")]
    NoCausalEvidence,
    #[error("positive and negative sets overlap at {0:?}")]
    OverlappingSets(String),
    #[error("empty region")]
    EmptyRegion,
    #[error("unknown score component {0:?}")]
    UnknownComponent(String),
    #[error("unknown score {0:?}")]
    UnknownScore(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("criterion unavailable: {0}")]
    CriterionUnavailable(String),
    #[error("criterion {0} supplied more than once")]
    DuplicateCriterion(String),
    #[error("missing generated-eval scores")]
    MissingGeneratedScores,
    #[error("invalid world spec: {0}")]
    InvalidWorld(String),
    #[error("unknown flag {0:?}")]
    UnknownFlag(String),
    #[error("assembling {concept}: {message}")]
    Assembly { concept: String, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },
    #[error("{path}: {source}")]
    Input {
        path: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_path(self, path: impl AsRef<std::path::Path>) -> Error {
        Error::Input {
            path: path.as_ref().display().to_string(),
            source: Box::new(self),
        }
    }
}
