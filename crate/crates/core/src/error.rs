use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the pipeline can surface. Each variant maps to a stable
/// machine-readable code used by the CLI (`ERROR <code>: <message>`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("zero variance input")]
    ZeroVariance,
    #[error("matrix is not positive definite (pivot {pivot} = {value:e}); raise lambda")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("metadata mismatch: {0}")]
    MetaMismatch(String),
    #[error("duplicate row id {0:?}")]
    DuplicateRowId(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("precomputed table has no row for trial {trial:?} under mask {mask_key:?}")]
    MissingPrecomputedRow { trial: String, mask_key: String },
    #[error("row ids do not align: {0}")]
    RowMismatch(String),
    #[error("mask [{start}, {start}+{len}) out of range for {timepoints} timepoints")]
    OutOfRange {
        start: usize,
        len: usize,
        timepoints: usize,
    },
    #[error("empty group: {0}")]
    EmptyGroup(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("band {band} narrower than length difference {diff}")]
    BandTooNarrow { band: usize, diff: usize },
    #[error("missing cells in row {0:?}")]
    MissingCells(String),
    #[error("K = {k} outside [1, {n}]")]
    KOutOfRange { k: usize, n: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("grid does not match spec: {0}")]
    SpecGridMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::LengthMismatch(..) => "LENGTH_MISMATCH",
            Error::ZeroVariance => "ZERO_VARIANCE",
            Error::NotPositiveDefinite { .. } => "NOT_POSITIVE_DEFINITE",
            Error::NonFinite(_) => "NON_FINITE",
            Error::InvalidShape(_) => "INVALID_SHAPE",
            Error::EmptyInput(_) => "EMPTY_INPUT",
            Error::BadMagic { .. } => "BAD_MAGIC",
            Error::TruncatedFile { .. } => "TRUNCATED_FILE",
            Error::MetaMismatch(_) => "META_MISMATCH",
            Error::DuplicateRowId(_) => "DUPLICATE_ROW_ID",
            Error::DimMismatch { .. } => "DIM_MISMATCH",
            Error::MissingPrecomputedRow { .. } => "MISSING_PRECOMPUTED_ROW",
            Error::RowMismatch(_) => "ROW_MISMATCH",
            Error::OutOfRange { .. } => "OUT_OF_RANGE",
            Error::EmptyGroup(_) => "EMPTY_GROUP",
            Error::EmptySequence => "EMPTY_SEQUENCE",
            Error::BandTooNarrow { .. } => "BAND_TOO_NARROW",
            Error::MissingCells(_) => "MISSING_CELLS",
            Error::KOutOfRange { .. } => "K_OUT_OF_RANGE",
            Error::InvalidSpec(_) => "INVALID_SPEC",
            Error::SpecGridMismatch(_) => "SPEC_GRID_MISMATCH",
            Error::InvalidParameter(_) => "INVALID_PARAMETER",
            Error::Parse(_) => "PARSE",
            Error::Json(_) => "JSON",
            Error::Io(_) => "IO",
        }
    }
}
