use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("identifier mismatch: {0}")]
    IdMismatch(String),

    #[error("small area `{0}` is not assigned to any large area")]
    UnassignedArea(String),

    #[error("unknown area `{0}`")]
    UnknownArea(String),

    #[error("large area `{0}` has zero population, shares are undefined")]
    ZeroLargeArea(String),

    #[error(
        "margin totals differ (rows {row_total}, columns {col_total}); reconcile the margins before fitting"
    )]
    MarginTotalsMismatch { row_total: f64, col_total: f64 },

    #[error("{kind} `{id}` has a positive target but no mass in the seed")]
    EmptySeedLine { kind: &'static str, id: String },

    #[error("non-positive cells: {0}")]
    NonPositiveCells(String),

    #[error("negative projected population for `{id}`: {value}")]
    NegativeProjection { id: String, value: f64 },

    #[error("missing deprivation flag for indicator `{indicator}` in household `{household}`; resolve missingness at ingestion")]
    MissingDeprivation {
        household: String,
        indicator: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("bootstrap failed: {dropped} of {total} replicates dropped ({reason})")]
    TooManyDropped {
        dropped: usize,
        total: usize,
        reason: String,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },

    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Short machine-readable name for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Invalid(_) => "invalid",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::IdMismatch(_) => "id_mismatch",
            Error::UnassignedArea(_) => "unassigned_area",
            Error::UnknownArea(_) => "unknown_area",
            Error::ZeroLargeArea(_) => "zero_large_area",
            Error::MarginTotalsMismatch { .. } => "margin_totals_mismatch",
            Error::EmptySeedLine { .. } => "empty_seed_line",
            Error::NonPositiveCells(_) => "non_positive_cells",
            Error::NegativeProjection { .. } => "negative_projection",
            Error::MissingDeprivation { .. } => "missing_deprivation",
            Error::Empty(_) => "empty",
            Error::TooManyDropped { .. } => "too_many_dropped",
            Error::Stage { source, .. } => source.kind(),
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
