use thiserror::Error;

/// Errors surfaced by the estimation library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A candidate characteristic function fell below the configured floor at
    /// a quadrature node. Carries the offending point and the magnitude seen.
    #[error("characteristic function degenerate at t = {t:?} (|phi| = {magnitude:.3e})")]
    DegeneratePoint { t: Vec<f64>, magnitude: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("identification failure: {0}")]
    Identification(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("dimension {d} unsupported: {msg}")]
    UnsupportedDimension { d: usize, msg: String },

    #[error("non-invertible transform: {0}")]
    NonInvertible(String),

    #[error("sampler aborted: {0}")]
    SamplerAbort(String),

    #[error("evaluator failed at node {node:?}: {source}")]
    Evaluator {
        node: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
