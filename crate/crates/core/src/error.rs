use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    Schema(String),

    #[error(
        "row {row}: feature `{feature}` has index {value}, outside domain of size {cardinality}"
    )]
    RowViolation {
        row: usize,
        feature: String,
        value: usize,
        cardinality: usize,
    },

    #[error("row {row}, column `{column}`: value `{value}` does not map to any declared label")]
    UnknownCategory {
        row: usize,
        column: String,
        value: String,
    },

    #[error("csv parse error at line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("invalid probability vector for {context}: {reason}")]
    InvalidProbability { context: String, reason: String },

    #[error("invalid privacy budget: {0}")]
    InvalidBudget(String),

    #[error("calibration covers {expected} queries but the bundle holds {found} tables")]
    QueryCountMismatch { expected: usize, found: usize },

    #[error("degenerate aggregate for pair {pair}: no positive mass")]
    DegenerateAggregate { pair: String },

    #[error("no bundle for client `{0}`")]
    MissingBundle(String),

    #[error("client `{client}` bundle has schema hash {found}, expected {expected}")]
    SchemaMismatch {
        client: String,
        expected: String,
        found: String,
    },

    #[error("client `{client}` bundle has noise scale {found}, expected {expected}")]
    NoiseScaleMismatch {
        client: String,
        expected: f64,
        found: f64,
    },

    #[error("aggregate has no table for pair {0}")]
    MissingPair(String),

    #[error("pool of {pool} clients has no swap neighbour for federations of size {k}")]
    NoNeighbor { pool: usize, k: usize },

    #[error("invalid federation: {0}")]
    InvalidFederation(String),

    #[error("search failed at federation [{federation}]: {source}")]
    SearchFailed {
        federation: String,
        #[source]
        source: Box<Error>,
    },

    #[error("exhaustive enumeration of C({pool}, {k}) = {count} federations exceeds the budget of {budget}")]
    CombinatorialBudget {
        pool: usize,
        k: usize,
        count: u128,
        budget: u128,
    },

    #[error("table cell ({row}, {col}) is {value}; the MI gradient needs strictly positive cells")]
    BoundaryCell { row: usize, col: usize, value: f64 },

    #[error("undefined metric: {0}")]
    DegenerateMetric(String),

    #[error("{phase} failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps `self` with the name of the protocol phase that produced it.
    pub fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }
}
