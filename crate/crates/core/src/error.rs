use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("degenerate tetrahedron {element} (volume {volume:e})")]
    DegenerateElement { element: usize, volume: f64 },

    #[error("{path}:{line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },

    #[error("non-finite coefficient {value} at quadrature point {point:?} of element {element}")]
    NonFiniteCoefficient {
        element: usize,
        point: [f64; 3],
        value: f64,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("basis is rank deficient at column {column}")]
    RankDeficient { column: usize },

    #[error("eigensolver did not converge after {iterations} iterations (max residual {residual:e})")]
    EigenNotConverged { iterations: usize, residual: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
