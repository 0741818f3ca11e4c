//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate unit id `{id}`")]
    DuplicateId { id: String },

    #[error("unit `{id}` has non-binary treatment {value}")]
    NonBinaryTreatment { id: String, value: i64 },

    #[error("unit `{id}` has propensity score {value} outside the open interval (0, 1)")]
    ScoreOutOfRange { id: String, value: f64 },

    #[error("unit `{id}` has a non-finite covariate")]
    NonFiniteCovariate { id: String },

    #[error("unit `{id}` has {got} covariates, expected {expected}")]
    CovariateLengthMismatch {
        id: String,
        got: usize,
        expected: usize,
    },

    #[error("strata labels cover {got} units but the sample has {expected}")]
    StrataLengthMismatch { got: usize, expected: usize },

    #[error("unit `{id}` has no propensity score")]
    MissingScore { id: String },

    #[error("unit `{id}` has no outcome")]
    MissingOutcome { id: String },

    #[error("unknown unit id `{id}` referenced by the design")]
    UnknownUnit { id: String },

    #[error("jitter magnitude {magnitude} is not in (0, {limit}) for this sample")]
    JitterTooLarge { magnitude: f64, limit: f64 },

    #[error("tied propensity scores at {value} (units `{a}`, `{b}`); jitter ties before matching")]
    TiedScores { value: f64, a: String, b: String },

    #[error("matching requires at least one treated and one control unit")]
    EmptyArm,

    #[error("design contains no matched pairs")]
    EmptyDesign,

    #[error("design is inconsistent with the sample: {reason}")]
    InvalidDesign { reason: String },

    #[error("connected component mixes pair orientations; the design is not an optimal match")]
    MixedOrientation,

    #[error("support characterization requires a design with no unmatched units")]
    UnmatchedPresent,

    #[error("logistic fit detected complete or quasi-complete separation")]
    Separation,

    #[error("singular linear system in {context}")]
    SingularSystem { context: String },

    #[error("logistic fit needs more observations than coefficients (n={n}, p+1={p1})")]
    TooFewObservations { n: usize, p1: usize },

    #[error("covariate vector has length {got}, model expects {expected}")]
    PredictLengthMismatch { got: usize, expected: usize },

    #[error("{what} exceeds the size cap ({got} > {cap})")]
    SizeCapExceeded {
        what: &'static str,
        got: usize,
        cap: usize,
    },

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 validation, 3 numerical, 4 size cap.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Separation | Error::SingularSystem { .. } => 3,
            Error::SizeCapExceeded { .. } => 4,
            _ => 2,
        }
    }
}
