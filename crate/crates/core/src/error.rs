use std::fmt;

use thiserror::Error;

/// What went wrong on a given line of a signature file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Header,
    MalformedLine,
    Timestamps,
    NegativePressure,
    TooFewSamples,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParseErrorKind::Header => "header",
            ParseErrorKind::MalformedLine => "malformed line",
            ParseErrorKind::Timestamps => "timestamps",
            ParseErrorKind::NegativePressure => "negative pressure",
            ParseErrorKind::TooFewSamples => "too few samples",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error ({kind}) at line {line}")]
    Parse { line: usize, kind: ParseErrorKind },

    #[error("degenerate step: timestamps {index} and {next} are not strictly increasing", next = .index + 1)]
    DegenerateStep { index: usize },

    #[error("series length {0} is odd; the midpoint split needs an even length")]
    OddLength(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate embedding: zero vector before normalization")]
    DegenerateEmbedding,

    #[error("non-finite value in {path}")]
    NonFinite { path: String },

    #[error("embedding {index} is not unit-norm (norm {norm})")]
    NonUnit { index: usize, norm: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that stem from numerics rather than bad data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::DegenerateEmbedding | Error::NonUnit { .. } | Error::Numeric(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
