//! Error types shared across the crate.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by hierarchy construction, covariance estimation,
/// combination, forecasting and data ingestion.
#[derive(Debug, Error)]
pub enum Error {
    /// A series identifier appears more than once across hierarchy levels.
    #[error("duplicate series id '{id}' in hierarchy")]
    DuplicateSeriesId {
        /// The offending identifier.
        id: String,
    },

    /// A grouping does not partition the bottom-level series exactly once.
    #[error("grouping '{grouping}' is not a partition of the bottom level: {detail}")]
    InconsistentPartition {
        /// Name of the offending grouping.
        grouping: String,
        /// What went wrong (missing or repeated bottom id).
        detail: String,
    },

    /// A vector or matrix has the wrong dimension for the operation.
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        /// What was being checked.
        what: &'static str,
        /// Expected dimension.
        expected: usize,
        /// Actual dimension.
        actual: usize,
    },

    /// A bottom-level value required for aggregation is absent.
    #[error("missing bottom value for series '{id}'")]
    MissingBottomValue {
        /// The bottom series without a value.
        id: String,
    },

    /// Not enough residual rows to estimate a covariance.
    #[error("too few observations: need at least {required}, got {actual}")]
    TooFewObservations {
        /// Minimum required rows.
        required: usize,
        /// Rows available.
        actual: usize,
    },

    /// A matrix expected to be symmetric is not.
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:.3e})")]
    NotSymmetric {
        /// Largest absolute difference between the matrix and its transpose.
        max_asymmetry: f64,
    },

    /// Jitter escalation failed to make the matrix positive definite.
    #[error("matrix remains singular after diagonal conditioning")]
    SingularAfterConditioning,

    /// The base-forecast error covariance could not be factorized.
    #[error("error covariance W is singular or indefinite")]
    SingularW,

    /// The constraint projection system C W_c C' could not be factorized.
    #[error("constraint rows are rank deficient; C W_c C' factorization failed")]
    RankDeficientConstraints,

    /// The dense KKT system of the oracle solver is singular.
    #[error("KKT system is singular")]
    SingularKkt,

    /// The reconciliation projection C W C' could not be factorized.
    #[error("reconciliation projection is singular")]
    SingularProjection,

    /// The residual panel carries no usable information for weighting.
    #[error("degenerate residual panel: {0}")]
    DegeneratePanel(String),

    /// A per-series expert covariance could not be inverted.
    #[error("singular per-series expert covariance for series '{series}'")]
    SingularSeriesCovariance {
        /// The affected series id.
        series: String,
    },

    /// A series is too short for the requested model.
    #[error("series '{id}' too short: need at least {required} observations, got {actual}")]
    SeriesTooShort {
        /// Affected series id.
        id: String,
        /// Minimum length for the model.
        required: usize,
        /// Actual length.
        actual: usize,
    },

    /// An imported forecast bundle misses an (expert, series) cell.
    #[error("unbalanced forecast bundle: {detail}")]
    UnbalancedBundle {
        /// Which cell or count is off.
        detail: String,
    },

    /// A series id not present in the hierarchy was referenced.
    #[error("unknown series id '{id}'")]
    UnknownSeriesId {
        /// The unrecognized identifier.
        id: String,
    },

    /// A forecast required by the evaluation plan is absent.
    #[error("missing forecast for approach '{approach}' at origin {origin}, horizon {horizon}")]
    MissingForecast {
        /// Approach identifier.
        approach: String,
        /// Origin (training length) of the missing forecast.
        origin: usize,
        /// Horizon of the missing forecast.
        horizon: usize,
    },

    /// The rolling plan leaves no test observations.
    #[error("empty test set: first training length {first_train} >= series length {total}")]
    EmptyTestSet {
        /// Initial training window length.
        first_train: usize,
        /// Total series length.
        total: usize,
    },

    /// A date gap exceeds the last-observation-carried-forward cap.
    #[error("series '{series}' has {gap} consecutive missing days (cap {cap})")]
    NonContiguousDates {
        /// Affected series id.
        series: String,
        /// Length of the gap found.
        gap: usize,
        /// Configured fill cap.
        cap: usize,
    },

    /// The same (date, series) pair appears twice in a dataset.
    #[error("duplicate row for series '{series}' on {date}")]
    DuplicateRow {
        /// Affected series id.
        series: String,
        /// The duplicated date.
        date: String,
    },

    /// A dataset value failed to parse as a finite number.
    #[error("non-numeric value for series '{series}' on {date}: '{value}'")]
    NonNumericValue {
        /// Affected series id.
        series: String,
        /// Row date.
        date: String,
        /// Raw offending field.
        value: String,
    },

    /// An approach id outside the supported vocabulary.
    #[error("unknown approach '{id}'")]
    UnknownApproach {
        /// The unrecognized approach id.
        id: String,
    },

    /// An expert id outside the supported vocabulary.
    #[error("unknown expert '{id}'")]
    UnknownExpert {
        /// The unrecognized expert id.
        id: String,
    },

    /// A configuration value outside its valid range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Wrapped I/O error.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Wrapped CSV error.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Wrapped JSON error.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable class for exit-code mapping and logs.
    pub fn class(&self) -> &'static str {
        match self {
            Error::DuplicateSeriesId { .. }
            | Error::InconsistentPartition { .. }
            | Error::MissingBottomValue { .. }
            | Error::UnknownSeriesId { .. } => "hierarchy",
            Error::DimensionMismatch { .. } => "shape",
            Error::TooFewObservations { .. }
            | Error::NotSymmetric { .. }
            | Error::SingularAfterConditioning
            | Error::DegeneratePanel(_) => "covariance",
            Error::SingularW
            | Error::RankDeficientConstraints
            | Error::SingularKkt
            | Error::SingularProjection
            | Error::SingularSeriesCovariance { .. } => "numerical",
            Error::SeriesTooShort { .. } => "data",
            Error::UnbalancedBundle { .. } | Error::MissingForecast { .. } => "bundle",
            Error::EmptyTestSet { .. } => "plan",
            Error::NonContiguousDates { .. }
            | Error::DuplicateRow { .. }
            | Error::NonNumericValue { .. } => "dataset",
            Error::UnknownApproach { .. }
            | Error::UnknownExpert { .. }
            | Error::InvalidParameter(_) => "config",
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => "io",
        }
    }
}
