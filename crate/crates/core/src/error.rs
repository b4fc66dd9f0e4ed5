use thiserror::Error;

use crate::admm::AdmmIterate;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("rate {x} Hz outside utility domain [0, {max}]")]
    Domain { x: f64, max: f64 },

    #[error("infeasible constraint set: {0}")]
    Infeasible(String),

    #[error("projection did not converge after {cycles} cycles")]
    ProjectionDiverged { cycles: usize, last: Vec<f64> },

    #[error("ADMM did not converge within {iterations} iterations")]
    NotConverged {
        iterations: usize,
        trace: Vec<AdmmIterate>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Protocol(#[from] ProtocolError),

    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Failures of the line codec.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("malformed record: field `{field}`: {reason}")]
    Malformed { field: String, reason: String },

    #[error("unsupported message tag `{0}`")]
    UnknownTag(String),

    #[error("cannot encode field `{field}`: {reason}")]
    Unencodable { field: String, reason: String },
}

impl ProtocolError {
    pub(crate) fn malformed(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ProtocolError::Malformed {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("endpoint `{0}` is not connected")]
    Disconnected(String),

    #[error("transport i/o: {0}")]
    Io(#[from] std::io::Error),
}
