use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by front ends to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate subject id `{0}`")]
    DuplicateSubjectId(String),
    #[error("row {row}, column `{column}`: value `{value}` is not a number")]
    ParseValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: non-finite value")]
    NonFiniteValue { row: usize, column: String },
    #[error("site `{site}` has {count} subject(s); at least 2 are required")]
    EmptySite { site: String, count: usize },
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("feature taxonomy mismatch: {0}")]
    TaxonomyMismatch(String),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions([f64; 3]),
    #[error("stratum `{group}` has {count} subject(s); at least 3 are required")]
    StratumTooSmall { group: String, count: usize },
    #[error("covariate design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("too few subjects: need at least {needed}, got {got}")]
    TooFewSubjects { needed: usize, got: usize },
    #[error("zero residual variance for every feature")]
    ZeroResidualVariance,
    #[error("mask leaves {included} value(s) for feature {feature}; at least 2 are required")]
    MaskTooAggressive { feature: usize, included: usize },
    #[error("empirical Bayes did not converge after {iterations} iterations (last change {change:e})")]
    EbNonConvergence { iterations: usize, change: f64 },
    #[error("column of length {len} is too short; the method needs at least {min}")]
    ColumnTooShort { len: usize, min: usize },
    #[error("unknown filter method `{0}`")]
    UnknownMethod(String),
    #[error("filter threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("subject `{0}` has no group label")]
    MissingGroupLabel(String),
    #[error("filter `{0}` needs a trained outlier detector")]
    MissingDetector(String),
    #[error("delta for feature {feature} must be positive, got {value}")]
    NonPositiveDelta { feature: usize, value: f64 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("training-mode batch needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),
    #[error("site has {0} subject(s); within-site standardization needs at least 2")]
    SiteTooSmall(usize),
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("pool exhausted: need {needed} `{label}` subject(s), {available} available")]
    PoolExhausted {
        label: String,
        needed: usize,
        available: usize,
    },
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("subject sets differ: {0}")]
    SubjectMismatch(String),
    #[error("reference standard deviation is zero for feature {0}")]
    ZeroReferenceStd(usize),
    #[error("input is empty")]
    EmptyInput,
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),
    #[error("control sample is degenerate (fewer than 2 values or zero spread)")]
    DegenerateControls,
    #[error("model was trained for a different feature layout ({0})")]
    ModelMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            InvalidConfig(_) | UnknownMethod(_) | InvalidThreshold(_) | MissingDetector(_)
            | InvalidFractions(_) | InvalidRange(_) => ErrorClass::Config,
            RankDeficientDesign
            | ZeroResidualVariance
            | EbNonConvergence { .. }
            | NonFiniteLoss { .. }
            | DegenerateBatch(_)
            | NonPositiveStd(_)
            | DegenerateControls
            | ZeroReferenceStd(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
