use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported manifold configuration: {0}")]
    UnsupportedManifold(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("point does not lie on the declared manifold (residual {residual:.3e})")]
    OffManifold { residual: f64 },

    #[error("no closed-form geodesic for manifold kind {0}")]
    NoGeodesic(String),

    #[error("vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("eigensolver did not converge: {converged} of {requested} pairs, worst residual {residual:.3e}")]
    EigenNonConvergence {
        requested: usize,
        converged: usize,
        residual: f64,
    },

    #[error("truncation level J={j} out of range 1..={j_max}")]
    JOutOfRange { j: usize, j_max: usize },

    #[error("spectral filter must satisfy chi(0) = 1, got {0}")]
    FilterNotUnit(f64),

    #[error("system matrix is not positive definite (J={j}); basis or row extraction is inconsistent")]
    NotSpd { j: usize },

    #[error("model grid is empty")]
    EmptyModelGrid,

    #[error("too few posterior draws: {got} < {min}")]
    TooFewDraws { got: usize, min: usize },

    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),

    #[error("empty diagnostic window: {0}")]
    EmptyWindow(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
