// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.
//!
//! Variant names double as the stable identifiers the CLI prints on stderr,
//! so renaming one is a breaking change for scripts that grep for them.

use std::path::PathBuf;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is indefinite: eigenvalue {eigenvalue:.6e} below -{tolerance:.3e}")]
    IndefiniteMatrix { eigenvalue: f64, tolerance: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("moment summary was already finalized")]
    AlreadyFinalized,

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("label column {column} has no samples in class {class}")]
    EmptyClass { column: usize, class: u8 },

    #[error("conditional mean difference has norm {norm:.3e}, no usable direction")]
    ZeroDirection { norm: f64 },

    #[error("cross-covariance leaves the image of the covariance (relative residual {residual:.3e})")]
    RangeViolation { residual: f64 },

    #[error("source concept cross-covariance has rank {rank}, expected {expected}")]
    ConceptRankDeficient { rank: usize, expected: usize },

    #[error("KKT system is singular")]
    SingularSystem,

    #[error("invalid concept world: {0}")]
    InvalidSpec(String),

    #[error("non-finite value at {0}")]
    NonFiniteValue(String),

    #[error("label value {value} at row {row}, column {column} is not 0 or 1")]
    InvalidLabel { row: usize, column: usize, value: f64 },

    #[error("labels are not partitioning: row {row} sums to {sum}")]
    NotPartitioning { row: usize, sum: u32 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),

    #[error("truncated header: {got} of {expected} bytes")]
    TruncatedHeader { expected: usize, got: usize },

    #[error("truncated payload: {got} of {expected} bytes")]
    TruncatedPayload { expected: u64, got: u64 },

    #[error("{extra} trailing bytes after payload")]
    TrailingData { extra: u64 },

    #[error("malformed document: {0}")]
    MalformedDocument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable variant name, printed by the CLI.
    pub fn name(&self) -> &'static str {
        match self {
            Error::NotSymmetric { .. } => "NotSymmetric",
            Error::IndefiniteMatrix { .. } => "IndefiniteMatrix",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::AlreadyFinalized => "AlreadyFinalized",
            Error::InsufficientSamples { .. } => "InsufficientSamples",
            Error::EmptyClass { .. } => "EmptyClass",
            Error::ZeroDirection { .. } => "ZeroDirection",
            Error::RangeViolation { .. } => "RangeViolation",
            Error::ConceptRankDeficient { .. } => "ConceptRankDeficient",
            Error::SingularSystem => "SingularSystem",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::NonFiniteValue(_) => "NonFiniteValue",
            Error::InvalidLabel { .. } => "InvalidLabel",
            Error::NotPartitioning { .. } => "NotPartitioning",
            Error::BadMagic { .. } => "BadMagic",
            Error::VersionUnsupported(_) => "VersionUnsupported",
            Error::TruncatedHeader { .. } => "TruncatedHeader",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::TrailingData { .. } => "TrailingData",
            Error::MalformedDocument(_) => "MalformedDocument",
            Error::Io { .. } => "Io",
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
