use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("element count {count} exceeds the configured cap {cap}")]
    TooManyElements { count: usize, cap: usize },

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite: pivot {pivot:.3e} at index {index}")]
    Indefinite { index: usize, pivot: f64 },

    #[error("constraint matrix is rank deficient; redundant constraint rows {rows:?}")]
    RankDeficient { rows: Vec<usize> },

    #[error("saddle-point system is singular (constant mode not pinned?)")]
    SingularSaddle,

    #[error("incompatible data: residual {residual:.3e} exceeds {tolerance:.1e}")]
    Incompatible { residual: f64, tolerance: f64 },

    #[error("singular Gram matrix (degenerate geometry?)")]
    SingularGram,

    #[error("coefficient out of bounds at ({x:.6}, {y:.6}): eigenvalues [{min:.6}, {max:.6}] not within [{alpha}, {beta}]")]
    CoefficientBounds {
        x: f64,
        y: f64,
        min: f64,
        max: f64,
        alpha: f64,
        beta: f64,
    },

    #[error("quadrature self-check failed: relative difference {difference:.3e}")]
    QuadratureNotConverged { difference: f64 },

    #[error("{what} check failed: {value:.3e} exceeds tolerance {tolerance:.1e}")]
    Tolerance {
        what: &'static str,
        value: f64,
        tolerance: f64,
    },

    #[error("dimension mismatch on cell {cell}: expected {expected}, found {found}")]
    Dimension {
        cell: usize,
        expected: usize,
        found: usize,
    },

    #[error("fine mesh under-resolves the coefficient: h = {h:.4e} > eps/4 = {limit:.4e}")]
    UnderResolved { h: f64, limit: f64 },

    #[error("point ({x}, {y}) lies outside the domain")]
    OutsideDomain { x: f64, y: f64 },

    #[error("periodic identification failed: {0}")]
    Periodicity(String),

    #[error("local solve failed on cell {cell}: {reason}")]
    LocalSolve { cell: usize, reason: String },

    #[error("cache miss: {}", keys.join(", "))]
    CacheMiss { keys: Vec<String> },

    #[error("corrupt cache file {path}: {reason}")]
    CacheCorrupt { path: PathBuf, reason: String },

    #[error("expression error: {0}")]
    Expression(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("iterative solver did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("sparse factorization failed: {0}")]
    Factorization(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Whether the error originates from user input (configuration, files,
    /// arguments) rather than a numerical failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Expression(_)
                | Error::InvalidArgument(_)
                | Error::InvalidMesh(_)
                | Error::Io { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
