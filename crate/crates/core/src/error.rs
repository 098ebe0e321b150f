use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },

    #[error("unbound symbol `{0}`")]
    UnboundSymbol(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("expression is not differentiable: {0}")]
    NotDifferentiable(String),

    #[error("expression is not a polynomial: {0}")]
    NotPolynomial(String),

    #[error("sequence diverges: residual ratio {ratio:.3e}")]
    Divergent { ratio: f64 },

    #[error("power iteration did not converge after {iterations} steps (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("operator is not hermitian: asymmetry {0:.3e}")]
    NotHermitian(f64),

    #[error("Hermite cutoff too small: boundary mass {0:.3e}")]
    CutoffTooSmall(f64),

    #[error("rank threshold is ambiguous: singular values {below:.3e} and {above:.3e} straddle {tol:.3e}")]
    AmbiguousRank { below: f64, above: f64, tol: f64 },

    #[error("quasi-projection defect {0:.3e} exceeds tolerance")]
    QuasiProjection(f64),

    #[error("correspondence certificate {0:.3e} exceeds threshold")]
    Certificate(f64),

    #[error("chart invariant violated: {0}")]
    Chart(String),

    #[error("linear algebra failure: {0}")]
    Linalg(String),
}

pub type Result<T> = std::result::Result<T, Error>;
