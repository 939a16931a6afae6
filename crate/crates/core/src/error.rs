use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("regime error: {0}")]
    Regime(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("bracketing failed: {0}")]
    Bracket(String),

    /// More than one sign change of the fiber derivative; contradicts uniqueness of the fiber maximum.
    #[error("fiber derivative changes sign {changes} times on [{lo}, {hi}]")]
    FiberNotUnique { changes: usize, lo: f64, hi: f64 },

    #[error("degenerate field: {0}")]
    Degenerate(String),

    #[error("optimizer stagnated: {0}")]
    Stagnation(String),

    #[error("infeasible construction: {0}")]
    Infeasible(String),

    #[error("input violates constraint: {0}")]
    Constraint(String),

    #[error("linear algebra: {0}")]
    LinAlg(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    /// A precomputation shared by several runs failed; carries its message.
    #[error("{0}")]
    Shared(String),
}

pub type Result<T> = std::result::Result<T, Error>;
