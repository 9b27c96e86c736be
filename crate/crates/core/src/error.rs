use std::io;

use thiserror::Error;

/// Errors produced by model construction, inference and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Innovation covariance could not be inverted at a (1-based) time point.
    #[error("innovation covariance is numerically singular at t={t} (condition estimate {condition:.3e})")]
    SingularInnovation { t: usize, condition: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error(
        "random-walk Metropolis accepted no proposals for block {block} after adaptation; \
         rescale the proposal (final scale {scale:.3e})"
    )]
    ZeroAcceptance { block: usize, scale: f64 },

    /// Every first-stage particle weight underflowed.
    #[error("all particle weights are numerically zero at t={t} (max log-weight {max_log_weight:.3e})")]
    DegenerateWeights { t: usize, max_log_weight: f64 },

    /// A filter failure while processing one posterior draw.
    #[error("draw {draw}: {source}")]
    Draw {
        draw: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed data at row {row}: {message}")]
    Data { row: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Wraps an error with the index of the posterior draw that produced it.
    pub(crate) fn at_draw(self, draw: usize) -> Self {
        match self {
            e @ Error::Draw { .. } => e,
            e => Error::Draw {
                draw,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
