use thiserror::Error;

/// Errors from reading or validating graph and cluster documents.
#[derive(Debug, Error)]
pub enum SpecError {
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("invalid partition count {count} for variable {variable}: {reason}")]
    PartitionCount {
        variable: String,
        count: usize,
        reason: String,
    },
}

impl SpecError {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        SpecError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CostError {
    #[error("owner machine {owner} out of range for {machines} machines")]
    OwnerOutOfRange { owner: usize, machines: usize },
    #[error("parameter-server variable {0} needs an owner machine")]
    MissingOwner(String),
    #[error("plan has no home for variable {0}")]
    UnplacedVariable(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("variable {variable} is synchronized by {actual:?}, expected {expected:?}")]
    MechanismMismatch {
        variable: String,
        expected: crate::placement::Mechanism,
        actual: crate::placement::Mechanism,
    },
    #[error("plan failed validation: {}", .0.join("; "))]
    InvalidPlan(Vec<String>),
    #[error("simulate_training needs at least 2 iterations, got {0}")]
    TooFewIterations(usize),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("fitting needs at least 3 distinct partition counts, got {0}")]
    InsufficientSamples(usize),
    #[error("cost model has no samples to bound the optimum")]
    Unfitted,
    #[error("graph has no partitionable sparse variable")]
    NothingToPartition,
    #[error("evaluation failed at P={partitions}: {message}")]
    Evaluator { partitions: usize, message: String },
}
