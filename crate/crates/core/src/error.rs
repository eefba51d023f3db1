use thiserror::Error;

use crate::annotations::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },

    #[error("{entity} references unknown {kind} id {id}")]
    Reference { entity: String, kind: &'static str, id: u64 },

    #[error("invalid box for {entity}: {message}")]
    Geometry { entity: String, message: String },

    #[error("dataset failed validation: {}", join_violations(.0))]
    Invalid(Vec<Violation>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid loss batch: {0}")]
    Batch(String),

    #[error("non-finite logit at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },

    #[error("taxonomy mismatch: {0}")]
    TaxonomyMismatch(String),

    #[error("unknown category: {0}")]
    UnknownCategory(String),

    #[error("no eligible samples: {0}")]
    NoEligible(String),

    #[error("could not place objects in image {image_id} after {attempts} attempts")]
    Infeasible { image_id: u64, attempts: usize },

    #[error("no detections available for round {round}")]
    MissingRound { round: usize },
}

impl Error {
    /// Stable machine-readable error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Reference { .. } => "referential_integrity",
            Error::Geometry { .. } => "geometry",
            Error::Invalid(_) => "validation",
            Error::Config(_) => "config",
            Error::Batch(_) => "loss_batch",
            Error::NonFinite { .. } => "non_finite",
            Error::TaxonomyMismatch(_) => "taxonomy_mismatch",
            Error::UnknownCategory(_) => "unknown_category",
            Error::NoEligible(_) => "no_eligible_samples",
            Error::Infeasible { .. } => "infeasible_scene",
            Error::MissingRound { .. } => "missing_round",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse { line: e.line(), column: e.column(), message: e.to_string() }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}
