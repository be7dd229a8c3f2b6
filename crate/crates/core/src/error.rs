use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-numeric cell in column `{column}` at data row {row}: {value:?}")]
    NonNumericCell { column: String, row: usize, value: String },
    #[error("no rows left after dropping {dropped} rows with missing values")]
    EmptyAfterDrop { dropped: usize },
    #[error("treatment column `{column}` has non-binary value {value} at row {row}")]
    NonBinaryTreatment { column: String, row: usize, value: f64 },
    #[error("propensity value {value} at row {row} is outside (0, 1)")]
    InvalidPropensity { row: usize, value: f64 },
    #[error("row index {index} out of range for n = {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("empty subset")]
    EmptySubset,
    #[error("dataset needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("invalid fold count K = {k} for n = {n}")]
    InvalidFoldCount { k: usize, n: usize },
    #[error("invalid subsample size b = {b} for n = {n}")]
    InvalidSubsampleSize { b: usize, n: usize },
    #[error("invalid repetition count M = {0}")]
    InvalidRepetitions(usize),
    #[error("unknown learner `{0}`")]
    UnknownLearner(String),
    #[error("learner failed on repetition {m}, fold {k}: {reason}")]
    LearnerFailure { m: usize, k: usize, reason: String },
    #[error("empty model list")]
    EmptyModelList,
    #[error("unknown moment `{0}`")]
    UnknownMoment(String),
    #[error("moment `{moment}` is incompatible with the dataset roles: {reason}")]
    IncompatibleRoles { moment: String, reason: String },
    #[error("solver did not converge: residual {residual:e} > tol {tol:e} after {iterations} iterations")]
    NoConvergence { residual: f64, tol: f64, iterations: usize },
    #[error("singular Jacobian: {0}")]
    SingularJacobian(String),
    #[error("non-finite Jacobian")]
    NonFiniteJacobian,
    #[error("zero variance: {0}")]
    ZeroVariance(String),
    #[error("zero diagonal entry {0} in Sigma-hat")]
    ZeroDiagonal(usize),
    #[error("matrix is not positive definite after repair")]
    NotPositiveDefinite,
    #[error("adaptive interval touches the grid boundary after widening")]
    GridTooNarrow,
    #[error("unsupported dimension: {0}")]
    Unsupported(String),
    #[error("group {group} is empty in fold {fold}")]
    EmptyGroup { group: usize, fold: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config invalid at {pointer:?}: {message}")]
    ConfigInvalid { pointer: String, message: String },
    #[error("external learner: {0}")]
    External(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
