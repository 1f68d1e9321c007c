use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by estimation, testing, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {block}: expected {expected} rows, found {found}")]
    DimensionMismatch {
        block: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {block} at row {row}, column {col}")]
    NonFinite {
        block: &'static str,
        row: usize,
        col: usize,
    },
    #[error("too few observations: n = {n} but need at least {needed}")]
    TooFewRows { n: usize, needed: usize },
    #[error("leading coefficient gamma[0] is zero; eta = gamma[1..]/gamma[0] is undefined")]
    ZeroLeadingGamma,
    #[error("robustification parameter must be positive, got tau = {0}")]
    NonpositiveTau(f64),
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("tau calibration equation has no solution: {0}")]
    TauUnsolvable(String),
    #[error("eta is not identifiable: beta is zero")]
    EtaUnidentifiable,
    #[error("zero-norm grouping row passed to pair weight")]
    ZeroNormU,
    #[error("bootstrap needs at least {min} replicates, got {got}")]
    BootstrapTooSmall { min: usize, got: usize },
    #[error("{dropped} of {total} bootstrap replicates failed to converge (limit 10%)")]
    BootstrapUnstable { dropped: usize, total: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing column {0:?} in CSV header")]
    MissingColumn(String),
    #[error("cannot parse cell at row {row}, column {col:?}: {value:?}")]
    BadCell {
        row: usize,
        col: String,
        value: String,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
