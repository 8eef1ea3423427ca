use num_complex::Complex64;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("allocation infeasible: {0}")]
    Allocation(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("model assembly error: {0}")]
    Assembly(String),

    #[error("eigenvalue iteration did not converge ({} of {dim} eigenvalues found)", partial.len())]
    NoConvergence { dim: usize, partial: Vec<Complex64> },

    #[error("gain tuning failed: {0}")]
    Tuning(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("slot {slot}: {source}")]
    AtSlot {
        slot: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Strips slot context and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtSlot { source, .. } => source.root(),
            e => e,
        }
    }
}
